use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("numerical error in {op}: {detail}")]
    Numerical { op: &'static str, detail: String },

    #[error("index {index} out of range for {what} of length {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("malformed example {id}: {reason}")]
    MalformedExample { id: String, reason: String },

    #[error("{path}:{line}: {reason}")]
    Schema {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("sequence of length {len} exceeds {max} positions")]
    TooLong { len: usize, max: usize },

    #[error("unknown idiom {0:?}")]
    UnknownIdiom(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("assignment infeasible: {rows} blanks but only {cols} candidates")]
    Infeasible { rows: usize, cols: usize },

    #[error("invalid segmentation: {0}")]
    Segmentation(String),

    #[error("inconsistent candidate group {0}")]
    Group(String),

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn numerical(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numerical {
            op,
            detail: detail.into(),
        }
    }

    /// Whether this error stems from bad user input or configuration rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
