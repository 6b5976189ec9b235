//! Error types shared across the workspace.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or argument (maps to CLI exit code 2).
    #[error("config error: {0}")]
    Config(String),

    /// A required upstream artifact is missing (CLI exit code 3).
    #[error("missing lineage: {0}")]
    MissingLineage(String),

    /// Non-finite values or diverging optimization (CLI exit code 4).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed or incompatible file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
