use qmmr_core::QmmrError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] QmmrError),

    #[error("cannot read or write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Bad inputs (exit code 2) as opposed to environment failures.
    pub fn is_validation(&self) -> bool {
        match self {
            CliError::Config(_) | CliError::Json(_) => true,
            CliError::Core(e) => e.is_validation(),
            CliError::Io { .. } | CliError::Csv(_) => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
