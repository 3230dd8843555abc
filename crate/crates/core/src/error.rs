use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("manifest is empty")]
    EmptyManifest,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error at {location}: {message}")]
    Schema { location: String, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("structure mismatch: {0}")]
    Structure(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("no ground truth boxes in the evaluation set")]
    NoGroundTruth,

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            location: location.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
