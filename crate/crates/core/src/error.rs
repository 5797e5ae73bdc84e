use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or input shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An argument is outside of its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A model, loop or experiment configuration is unusable.
    #[error("configuration error: {0}")]
    Config(String),

    /// A data file does not follow its declared format.
    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("oracle error: {0}")]
    Oracle(String),

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

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }
}
