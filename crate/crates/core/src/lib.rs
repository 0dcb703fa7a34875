//! Core data types and numerics for the single-radiograph CT reconstruction
//! pipeline: volumes with physical spacing, procedural thorax phantoms,
//! parallel-beam radiograph synthesis, bit-exact file I/O, and the
//! image-quality metrics used to score reconstructions.
//!
//! Everything here is deterministic: phantoms are pure functions of their
//! parameters, projections accumulate in a fixed order, and the `parallel`
//! feature only distributes work whose per-element result is independent of
//! thread count.

pub mod error;
pub mod io;
pub mod metrics;
pub mod parallel;
pub mod phantom;
pub mod projector;
pub mod volume;

pub use error::CoreError;
pub use phantom::{LabelMap, OrganLabel, PhantomParams};
pub use projector::{ProjectorConfig, Radiograph, RadiographDomain};
pub use volume::{Unit, Volume};

/// Hex-encoded SHA-256 of a little-endian f32 slice. Used to pin regression
/// oracles and to hash-verify pipeline artifacts.
pub fn content_hash_f32(values: &[f32]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    hex_string(&hasher.finalize())
}

/// Hex-encoded SHA-256 of raw bytes.
pub fn content_hash_bytes(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex_string(&Sha256::digest(bytes))
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        use std::fmt::Write;
        let _ = write!(s, "{b:02x}");
    }
    s
}
