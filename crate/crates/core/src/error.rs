use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("lexical error at byte {offset}: {message}")]
    Lex { offset: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("input of length {len} exceeds context length {max}")]
    InputTooLong { len: usize, max: usize },

    #[error("training diverged at epoch {epoch}, step {step} (last finite loss {last_finite_loss})")]
    Diverged {
        epoch: usize,
        step: usize,
        last_finite_loss: f64,
    },

    #[error("non-finite gradient at {param}[{index}]")]
    NonFiniteGradient { param: String, index: usize },

    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            message: message.into(),
        }
    }
}
