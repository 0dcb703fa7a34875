//! A small reverse-mode autodiff engine over dense f64 tensors.
//!
//! Graphs are built eagerly: every op computes its value on creation, and
//! [`graph::Graph::backward`] walks the tape in reverse. The op set is exactly
//! what the reconstruction pipeline needs (3D convolution, voxel shuffle,
//! attention primitives, per-row z-score normalization, straight-through
//! gather) and every backward rule is validated against central finite
//! differences in the test suite.
//!
//! Parallel kernels partition outputs into disjoint chunks with fixed-order
//! inner accumulation, so values and gradients are bitwise independent of
//! thread count.

pub mod adam;
mod conv;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod params;
pub mod tensor;

pub use adam::AdamConfig;
pub use error::NnError;
pub use graph::{Graph, NodeId};
pub use params::{Grads, Param, ParamStore};
pub use tensor::Tensor;
