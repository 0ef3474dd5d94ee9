use thiserror::Error;

/// Errors produced by the decongestion laboratory.
#[derive(Error, Debug)]
pub enum Error {
    #[error("preferences required: {0}")]
    MissingPreferences(&'static str),

    #[error("shape mismatch: {context} (expected {expected}, got {got})")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("pricing failed: {0}")]
    Pricing(String),

    #[error("degenerate instance: {0}")]
    Degenerate(String),

    #[error("enumeration too large: {0}")]
    EnumerationTooLarge(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("data ingestion failed at line {line}: {reason}")]
    Ingestion { line: usize, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
