use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("grid spec mismatch")]
    GridSpecMismatch,

    #[error("empty point set: {0}")]
    EmptySet(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("class id {class} out of range (limit {limit})")]
    InvalidClass { class: usize, limit: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("scene generation gave up after {0} placement attempts")]
    PlacementExhausted(usize),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
