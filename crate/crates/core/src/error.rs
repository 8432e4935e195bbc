//! Shared error type for the whole library.

use thiserror::Error;

/// All failures the library can report.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix dimensions do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A tensor has the wrong shape for an operation (e.g. non-scalar loss).
    #[error("shape error: {0}")]
    Shape(String),

    /// An index (class label, position) is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// An object is in the wrong state for the operation (missing gradient,
    /// consumed tape, ...).
    #[error("state error: {0}")]
    State(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Input data violates a precondition (empty set, single-class labels, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A binary file does not match its declared format.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// A numeric procedure failed (singular matrix, zero bandwidth, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A metric is undefined for the given inputs (e.g. no misclassifications).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A statistical test received degenerate input (e.g. all-zero differences).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
