//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by dataset handling, model math, and training.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on arguments or configuration does not hold.
    #[error("validation error: {0}")]
    Validation(String),

    /// An operation was invoked on a value that lacks required state
    /// (e.g. noise scoring without a clean-label matrix).
    #[error("state error: {0}")]
    State(String),

    /// A file could not be parsed.
    #[error("parse error in {path}, line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// A loss term became non-finite during training.
    #[error("non-finite value in term `{term}` at epoch {epoch}, batch {batch}")]
    NonFinite {
        term: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(message: impl Into<String>) -> Self {
        Error::Validation(message.into())
    }

    pub fn state(message: impl Into<String>) -> Self {
        Error::State(message.into())
    }

    /// True for errors caused by bad inputs rather than runtime failures.
    /// The command-line frontend maps these to exit code 1.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::State(_) | Error::Parse { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
