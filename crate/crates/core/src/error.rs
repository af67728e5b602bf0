use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A dataset or table line that could not be parsed. `line` is 1-based.
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    /// Invalid configuration value; `field` is the dotted path of the offending key.
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input outside an operation's domain, e.g. a zero-norm vector passed to cosine.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value in loss component `{component}` at step {step}")]
    NonFinite { component: String, step: u64 },

    #[error("instance `{id}`: {source}")]
    Instance {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn for_instance(self, id: &str) -> Self {
        Error::Instance {
            id: id.to_string(),
            source: Box::new(self),
        }
    }
}
