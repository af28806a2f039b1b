use std::io;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum FuseError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("segmentation error: {0}")]
    Segmentation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl FuseError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        FuseError::Dimension(msg.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        FuseError::Format {
            what,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, FuseError>;
