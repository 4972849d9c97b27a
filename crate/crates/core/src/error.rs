//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("gradient requested of a non-scalar node {node} with shape {shape:?}")]
    NotScalar { node: usize, shape: Vec<usize> },

    #[error("unknown leaf `{0}`")]
    UnknownLeaf(String),

    #[error("duplicate leaf `{0}`")]
    DuplicateLeaf(String),

    #[error("key mismatch: {0}")]
    KeyMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label row {row} sums to {sum}, expected 1")]
    LabelNotNormalized { row: usize, sum: f64 },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("workers hold diverging parameters (worker {0})")]
    WorkerDivergence(usize),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
