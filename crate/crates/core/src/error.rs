use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: JSON parse error at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("referential integrity violated: {message} (offending ids: {ids:?})")]
    Referential { message: String, ids: Vec<u64> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: image format error: {message}")]
    ImageFormat { path: PathBuf, message: String },

    #[error("detection without a confidence score where one is required (image {image_id})")]
    MissingScore { image_id: u64 },

    #[error("cache miss for image {image_id} at scale {scale_tag}")]
    CacheMiss { image_id: u64, scale_tag: String },

    #[error("detector adapter failed on image {image_id}: {message}")]
    Adapter { image_id: u64, message: String },

    #[error("{0}")]
    Serialize(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
