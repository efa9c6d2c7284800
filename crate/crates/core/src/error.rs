use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("{0}: zero-norm vector")]
    ZeroNorm(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite gradient in tensor `{0}`")]
    NonFinite(String),

    #[error("no fixture entry for {0}")]
    MissingFixture(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}: output exists and is not empty (pass --force to overwrite)")]
    OutputExists(PathBuf),

    #[error("gradient check failed:\n{0}")]
    GradCheck(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
