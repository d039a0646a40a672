//! Error type shared by every pipeline stage.
//!
//! Errors split into two coarse categories that map onto the CLI's exit
//! codes: precondition violations (exit 2) and I/O or format failures
//! (exit 3).

use thiserror::Error;

/// Coarse error class used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// A caller violated a documented precondition or invariant.
    Precondition,
    /// Reading, writing, or parsing external data failed.
    IoOrFormat,
}

#[derive(Debug, Error)]
pub enum Error {
    /// A vector with zero L2 norm reached an operation that needs a direction.
    #[error("degenerate input: {0} has zero norm")]
    DegenerateVector(&'static str),

    /// Two vectors or grids that must agree in shape do not.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// Grid shapes differ where identical shapes are required.
    #[error("shape mismatch: expected {expected_h}x{expected_w}, got {got_h}x{got_w}")]
    ShapeMismatch {
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Text input was empty (or contained no tokens) where content is required.
    #[error("empty text input: {0}")]
    EmptyText(&'static str),

    /// Generic precondition violation with a human-readable explanation.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// An id was inserted twice into a store that requires uniqueness.
    #[error("duplicate id: {0}")]
    DuplicateId(String),

    /// A referenced id does not exist.
    #[error("unknown id: {0}")]
    UnknownId(String),

    /// A referenced snapshot does not exist (or was discarded by a rollback).
    #[error("unknown snapshot: {0}")]
    UnknownSnapshot(String),

    /// A stored entry's content digest no longer matches its payload.
    #[error("tamper detected: digest mismatch for entry {id}")]
    Tamper { id: String },

    /// A text format could not be parsed.
    #[error("format error at {path}:{line}: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Format { .. } | Error::Io { .. } | Error::Tamper { .. } => {
                ErrorCategory::IoOrFormat
            }
            _ => ErrorCategory::Precondition,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: &std::path::Path, line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.display().to_string(),
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
