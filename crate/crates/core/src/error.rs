use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("episode {episode}: {field}: {message}")]
    Validation {
        episode: usize,
        field: String,
        message: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("sentence has {len} tokens, maximum is {max}")]
    TooLong { len: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("type `{0}` has no support mention, prototype is undefined")]
    PrototypeUndefined(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
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

    pub(crate) fn validation(episode: usize, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            episode,
            field: field.into(),
            message: message.into(),
        }
    }
}
