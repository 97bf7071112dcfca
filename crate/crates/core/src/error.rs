use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violated a constraint.
    #[error("invalid configuration `{key}`: {constraint}")]
    Config { key: String, constraint: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dataset error: {0}")]
    Data(String),

    /// A list-file row could not be ingested.
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    /// A forward pass produced a non-finite value.
    #[error("non-finite value in {tensor}")]
    NonFinite { tensor: String },
}

impl Error {
    pub fn config(key: impl Into<String>, constraint: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            constraint: constraint.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
