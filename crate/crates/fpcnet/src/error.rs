//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor/kernel dimension did not match, with the offending axis named.
    #[error("dimension mismatch on {axis}: expected {expected}, got {actual}")]
    Dimension {
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A configuration value violates a precondition.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Backward was requested without a retained forward state, or a probe
    /// targeted a layer that does not exist / has the wrong kind.
    #[error("invalid layer reference: {0}")]
    Layer(String),

    /// Malformed image or dataset file, with a byte offset where parsing stopped.
    #[error("malformed file {path} at byte {offset}: {message}")]
    Malformed {
        path: String,
        offset: usize,
        message: String,
    },

    /// Training loss became non-finite; reported with the iteration and lr.
    #[error("non-finite loss at iteration {iteration} (lr {lr}); aborting")]
    NonFiniteLoss { iteration: u64, lr: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(axis: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            axis,
            expected,
            actual,
        }
    }
}
