//! Shared training machinery: errors, CSV logging, and finiteness guards.

use std::io::Write;

use xct_core::CoreError;
use xct_nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing dependency checkpoint for stage {stage}")]
    MissingDependency { stage: String },

    #[error("non-finite loss at step {step}: term {term} exploded")]
    NumericalAbort { term: String, step: usize },

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Nn(#[from] NnError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    pub fn shape(msg: impl Into<String>) -> Self {
        TrainError::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        TrainError::Config(msg.into())
    }
}

/// Abort when any named loss term stops being finite.
pub fn guard_finite(terms: &[(&str, f64)], step: usize) -> Result<(), TrainError> {
    for (name, value) in terms {
        if !value.is_finite() {
            return Err(TrainError::NumericalAbort {
                term: (*name).to_string(),
                step,
            });
        }
    }
    Ok(())
}

/// Minimal CSV logger with fixed float formatting so reruns are
/// byte-identical.
pub struct CsvLog<'a> {
    out: Option<&'a mut dyn Write>,
    wrote_header: bool,
}

impl<'a> CsvLog<'a> {
    pub fn new(out: Option<&'a mut dyn Write>) -> Self {
        CsvLog { out, wrote_header: false }
    }

    pub fn row(&mut self, header: &str, cells: std::fmt::Arguments<'_>) -> Result<(), TrainError> {
        if let Some(w) = self.out.as_mut() {
            if !self.wrote_header {
                writeln!(w, "{header}")?;
                self.wrote_header = true;
            }
            writeln!(w, "{cells}")?;
        }
        Ok(())
    }
}
