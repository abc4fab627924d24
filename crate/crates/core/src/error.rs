use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A rate or discount outside the model's domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Brute-force enumeration refused because the instance is too large.
    #[error("instance too large: {count} allocations exceed the enumeration limit of {limit}")]
    Capacity { count: u128, limit: u128 },

    #[error("inconsistent observation: {0}")]
    Consistency(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("setup error: {0}")]
    Setup(String),

    /// Config file rejected; the message names the offending key.
    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
