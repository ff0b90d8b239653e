use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("{op}: domain error, {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite gradient for parameter `{param}`")]
    NanGradient { param: String },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated data: expected {expected} bytes, found {actual}")]
    Length { expected: u64, actual: u64 },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }

    pub fn at_path(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Self {
        let path = path.into();
        move |source| Error::Path { path, source }
    }

    /// True for failures caused by NaN/Inf values during computation.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NanGradient { .. })
    }
}
