//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition (bad shapes, empty inputs,
    /// out-of-range indices, inconsistent configuration).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A data file could not be interpreted; names the file and the offending
    /// line or record.
    #[error("{}: line {line}: {message}", path.display())]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// A failure scoped to a single image-caption pair (missing image file,
    /// missing tensor record, missing proposals).
    #[error("pair {pair_id}: {message}")]
    Pair { pair_id: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }

    pub fn malformed(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub fn pair(pair_id: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Pair {
            pair_id: pair_id.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
