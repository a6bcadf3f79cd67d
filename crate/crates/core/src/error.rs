use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated the domain of an operation (non-positive depth,
    /// out-of-range raw count, mismatched shapes, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A gradient or loss evaluation produced NaN/Inf.
    #[error("non-finite value in term `{term}`")]
    NonFinite { term: String },

    #[error("optimizer diverged after {backtracks} consecutive backtracks")]
    Diverged { backtracks: usize },

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
