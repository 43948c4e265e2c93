//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or payload dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid model/solver/run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A protocol contract was violated (out-of-order backward, bad frame,
    /// stale clock advance, unknown layer, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Transport-level failure (closed channel, socket error).
    #[error("transport error: {0}")]
    Transport(String),

    /// On-disk data does not match its documented format.
    #[error("format error: {0}")]
    Format(String),

    /// A snapshot failed its integrity check.
    #[error("checksum mismatch: {0}")]
    Checksum(String),

    /// Sufficient-factor decomposition requested for a layer kind that has none.
    #[error("unsupported layer: {0}")]
    UnsupportedLayer(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}
