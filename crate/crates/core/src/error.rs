use thiserror::Error;

/// Errors raised by the numerical core, the model loader and the data pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f32 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("manifest parse error: {0}")]
    ManifestParse(String),

    #[error("weight blob too short: tensor `{tensor}` needs bytes {offset}..{end} but blob has {len} bytes")]
    BlobTruncated {
        tensor: String,
        offset: usize,
        end: usize,
        len: usize,
    },

    #[error("weight blob has {trailing} trailing bytes after offset {consumed}")]
    BlobTrailing { consumed: usize, trailing: usize },

    #[error("unknown layer id `{0}`")]
    UnknownLayer(String),

    #[error("layer `{layer}` is not convolutional ({kind}); unit dissection needs spatial feature maps")]
    NotSpatial { layer: String, kind: String },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
