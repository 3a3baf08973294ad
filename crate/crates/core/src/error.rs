//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor or field shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Structured input (skeleton layout, topology, labels) violates its schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// A value-level precondition failed (non-finite input, empty sequence, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A computation produced non-finite values or diverged.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// On-disk format violation (bad magic, truncated payload, hash mismatch).
    #[error("format error: {0}")]
    Format(String),

    /// Configuration hashes of two artifacts that must match do not.
    #[error("config hash mismatch: expected {expected:016x}, found {found:016x} in {context}")]
    HashMismatch {
        expected: u64,
        found: u64,
        context: String,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
