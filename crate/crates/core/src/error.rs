use thiserror::Error;

/// Errors raised by the analysis routines.
#[derive(Debug, Error)]
pub enum AnatomyError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("numeric failure in {op}: {message}")]
    Numeric { op: &'static str, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AnatomyError {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        AnatomyError::Validation(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        AnatomyError::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, AnatomyError>;
