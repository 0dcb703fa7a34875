use std::path::PathBuf;

/// Errors raised by volume, phantom, projector, I/O, and metric code.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("unit mismatch: expected {expected}, got {actual}")]
    UnitMismatch { expected: String, actual: String },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CoreError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidArg(msg.into())
    }

    pub fn dims(msg: impl Into<String>) -> Self {
        CoreError::DimMismatch(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        CoreError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}
