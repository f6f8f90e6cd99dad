use std::path::PathBuf;

use thiserror::Error;

/// Failures of the command layer. Each maps to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed artifact {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported schema in {path}: found {found:?}, expected {expected:?}")]
    Schema {
        path: PathBuf,
        found: String,
        expected: &'static str,
    },

    #[error(transparent)]
    Lab(#[from] apolab::Error),

    #[error("{0}")]
    Usage(String),

    #[error("{failed} of {total} seeds failed")]
    PartialFailure { failed: usize, total: usize },

    #[error("all {0} seeds failed")]
    AllFailed(usize),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        CliError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// 1 for bad configuration or usage, 3 when only some seeds failed, 2 for
    /// every other runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 1,
            CliError::Lab(apolab::Error::InvalidConfig(_)) => 1,
            CliError::PartialFailure { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
