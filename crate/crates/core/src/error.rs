use thiserror::Error;

/// Errors surfaced by the library.
///
/// Operations with preconditions report violations instead of panicking, so
/// scripted replays and CLI runs can name the failing rule.
#[derive(Debug, Error)]
pub enum Error {
    /// A stated precondition of an operation does not hold.
    #[error("{op}: {reason}")]
    Precondition { op: &'static str, reason: String },

    /// A step in a scripted replay was not applicable in the current state.
    #[error("invalid step {index}: {reason}")]
    InvalidStep { index: usize, reason: String },

    /// An operation requiring a valid execution was given an invalid one.
    #[error("invalid execution: {0}")]
    InvalidExecution(String),

    /// Paired sequences have inconsistent lengths.
    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    /// Textual input (CSV fields, rationals, configs) failed to parse.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn precondition(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Precondition { op, reason: reason.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
