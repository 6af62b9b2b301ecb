use thiserror::Error;

#[derive(Debug, Error)]
pub enum NifError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {message}")]
    Numeric {
        message: String,
        /// Pivot, layer or example index the failure was detected at, when known.
        index: Option<usize>,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("state error: {0}")]
    State(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("config error for key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("training error: {0}")]
    Train(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NifError {
    pub(crate) fn numeric(message: impl Into<String>) -> Self {
        NifError::Numeric {
            message: message.into(),
            index: None,
        }
    }

    pub(crate) fn numeric_at(message: impl Into<String>, index: usize) -> Self {
        NifError::Numeric {
            message: message.into(),
            index: Some(index),
        }
    }

    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        NifError::Format {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        NifError::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, NifError>;
