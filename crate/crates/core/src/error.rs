//! Error taxonomy shared by every module in the crate.
//!
//! The variants map one-to-one onto the failure classes callers are expected
//! to distinguish: bad configuration, mismatched tensor shapes, non-finite
//! numerics, misuse of an API contract, malformed files, and plain I/O.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violated its documented range. Always names the
    /// offending field so the message is actionable without a stack trace.
    #[error("configuration error: field `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Tensor dimensions did not line up. Both shapes are reported.
    #[error("shape error: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    /// A NaN or infinity surfaced where finite arithmetic was required.
    #[error("numeric fault: {0}")]
    Numeric(String),

    /// An API precondition was violated (empty batch, unsorted input, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data carried values outside the operation's domain.
    #[error("data error: {0}")]
    Data(String),

    /// A serialized artifact could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape { expected: expected.into(), got: got.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
