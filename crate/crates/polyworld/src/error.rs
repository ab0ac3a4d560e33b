//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's contract (shape mismatch, bad sizes,
    /// out-of-range indices, non-finite inputs).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Geometrically degenerate input (coincident points, empty ring).
    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    /// Short category tag used for CLI exit messages.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::Degenerate(_) => "geometry",
            Error::Parse(_) => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
        }
    }
}
