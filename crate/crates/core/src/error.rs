use thiserror::Error;

/// Errors raised by model construction, validation and estimation.
#[derive(Debug, Error)]
pub enum QmmrError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl QmmrError {
    pub fn validation(msg: impl Into<String>) -> Self {
        QmmrError::Validation(msg.into())
    }

    pub(crate) fn mismatch(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        QmmrError::DimensionMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }

    /// True for errors caused by malformed inputs rather than I/O.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            QmmrError::Validation(_) | QmmrError::DimensionMismatch { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, QmmrError>;
