//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type. Variants map onto distinct CLI exit classes
/// (configuration, data, argument, numeric).
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad hyperparameters, missing files named in a
    /// config, incompatible checkpoint.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// An operation was called with out-of-contract arguments
    /// (shape mismatch, index out of range, empty input).
    #[error("argument error: {0}")]
    Argument(String),

    /// A numeric invariant was violated (non-finite intermediate, zero
    /// denominator).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code class for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Json(_) => 3,
            Error::Numeric(_) => 4,
            Error::Argument(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
