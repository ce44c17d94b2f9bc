//! Error type shared by every pipeline stage.

use thiserror::Error;

/// Coarse error category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Io,
    Schema,
    Validation,
    Training,
    Other,
}

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Input file does not match the declared column layout.
    #[error("schema error: {0}")]
    Schema(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// A parameter or configuration value is out of its legal range.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// Data fails a precondition (unsorted stream, empty batch, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Numeric guard tripped: zero denominator, constant series, zero gain.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Tensor shape or channel mismatch inside the network.
    #[error("shape error: {0}")]
    Shape(String),

    #[error("training aborted at epoch {epoch}: {reason}")]
    TrainAborted { epoch: usize, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),
}

impl CoreError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            CoreError::Io(_) => ErrorCategory::Io,
            CoreError::Schema(_) | CoreError::Csv(_) => ErrorCategory::Schema,
            CoreError::InvalidParam(_)
            | CoreError::Validation(_)
            | CoreError::Numeric(_)
            | CoreError::Shape(_)
            | CoreError::Config(_) => ErrorCategory::Validation,
            CoreError::TrainAborted { .. } => ErrorCategory::Training,
            CoreError::Checkpoint(_) => ErrorCategory::Io,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
