//! Pipeline orchestration for single-radiograph CT reconstruction: corpus
//! synthesis, the three training stages, end-to-end reconstruction, and
//! evaluation, driven by one JSON config.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use commands::{cmd_evaluate, cmd_inspect, cmd_reconstruct, cmd_synth, cmd_train, Stage};
pub use config::PipelineConfig;
pub use error::CliError;
pub use manifest::RunManifest;
