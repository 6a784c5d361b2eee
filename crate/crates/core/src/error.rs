use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum UqError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad bundle at {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("grid metadata mismatch: {0}")]
    MetaMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

impl UqError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UqError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        UqError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, UqError>;
