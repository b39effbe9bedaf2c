//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by defense, attack, and benchmark operations.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed or inconsistent input data (datasets, manifests).
    #[error("input error: {0}")]
    Input(String),

    /// A persisted artifact could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    /// Invalid benchmark or experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A referenced checkpoint or cache entry does not exist.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for the CLI: 2 config, 3 missing artifact, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingArtifact(_) => 3,
            _ => 1,
        }
    }
}
