use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum RaidError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("instance too large for the exact solver: {rows}x{cols} > {limit} cells")]
    TooLarge { rows: usize, cols: usize, limit: usize },

    #[error("numerical abort at epoch {epoch}: {reason}")]
    NumericalAbort { epoch: usize, reason: String },

    #[error("malformed input in {path}: {count} of {total} lines rejected (first lines: {lines:?})")]
    Malformed {
        path: PathBuf,
        count: usize,
        total: usize,
        lines: Vec<usize>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RaidError>;

pub(crate) fn invalid(msg: impl Into<String>) -> RaidError {
    RaidError::InvalidInput(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> RaidError {
    let path = path.into();
    move |source| RaidError::Io { path, source }
}
