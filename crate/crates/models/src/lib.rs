//! The three learned stages of the single-radiograph CT reconstruction
//! pipeline:
//!
//! 1. [`compressor`] — a 3D convolutional autoencoder with a vector-quantized
//!    bottleneck (homogeneous-space codebook losses, voxel-shuffle
//!    super-resolution tail, paired 2D/3D discriminators).
//! 2. [`prior`] — a progressive encoder that lifts a frontal radiograph into
//!    the quantized latent space via a shared per-column depth MLP and 3D
//!    refinement convolutions.
//! 3. [`diffusion`] — a prior-conditioned latent denoiser with in-plane
//!    convolutions and cross-attention over prior tokens, plus DDPM/DDIM
//!    samplers.
//!
//! All training is deterministic for a fixed seed, resumable bit-exactly from
//! checkpoints, and aborts with the offending term named if a loss goes
//! non-finite.

pub mod codebook;
pub mod compressor;
pub mod diffusion;
pub mod latent;
pub mod prior;
pub mod reconstruct;
pub mod trainer;

pub use codebook::{Codebook, LookupMode};
pub use latent::{LatentGrid, PriorTokens};
pub use trainer::TrainError;
