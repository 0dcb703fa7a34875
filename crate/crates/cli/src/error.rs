//! CLI errors carrying process exit codes: 2 config, 3 dependency,
//! 4 numerical abort, 1 anything else.

use xct_models::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn dependency(msg: impl Into<String>) -> Self {
        CliError::Dependency(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    /// Train-stage validation failures are config errors at the CLI surface.
    pub fn from_train_config(e: TrainError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::NumericalAbort { .. } => CliError::Numerical(e.to_string()),
            TrainError::MissingDependency { .. } => CliError::Dependency(e.to_string()),
            TrainError::Config(_) | TrainError::Shape(_) => CliError::Config(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<xct_core::CoreError> for CliError {
    fn from(e: xct_core::CoreError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<xct_nn::NnError> for CliError {
    fn from(e: xct_nn::NnError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("io error: {e}"))
    }
}
