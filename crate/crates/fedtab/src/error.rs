//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A cell or header failed to parse during CSV ingestion.
    #[error("ingestion error at row {row}, column '{column}': {message}")]
    Ingestion {
        row: usize,
        column: String,
        message: String,
    },

    /// Schema construction or validation failed.
    #[error("schema error: {0}")]
    Schema(String),

    /// Invalid configuration value or missing input.
    #[error("configuration error: {0}")]
    Config(String),

    /// A cell could not be encoded into its normalized representation.
    #[error("encoding error in column '{column}': {message}")]
    Encoding { column: String, message: String },

    /// A normalized value could not be decoded back to a raw cell.
    #[error("decoding error in column '{column}': {message}")]
    Decoding { column: String, message: String },

    /// Two federated payloads disagree on shape or layout.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// An operation was called with arguments violating its contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Numerical failure that indicates misuse of priors or broken invariants.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}
