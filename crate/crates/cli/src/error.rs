use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    /// A stage was asked to run before the stage it depends on.
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error(transparent)]
    Core(#[from] hmnas_core::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 0 success, 2 config, 3 prerequisite, 4 numeric divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use hmnas_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_) | E::Spec(_)) => 2,
            CliError::Prerequisite(_) => 3,
            CliError::Core(E::Divergence { .. } | E::NonFinite(_)) => 4,
            _ => 1,
        }
    }
}
