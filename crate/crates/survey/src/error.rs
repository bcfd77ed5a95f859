use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("lexicon: {0}")]
    Lexicon(String),

    #[error("invalid annotation: {0}")]
    Invalid(String),

    #[error("annotation {id} was already stored with a different body")]
    Conflict { id: String },

    #[error("annotation log {path} line {line}: {reason}")]
    CorruptLog { path: PathBuf, line: usize, reason: String },

    #[error("catalog: {0}")]
    Catalog(String),

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
}

pub type Result<T> = std::result::Result<T, Error>;
