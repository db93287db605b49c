use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{layer}: {what} = {value} is not divisible by {n}; {hint}")]
    Divisibility {
        layer: String,
        what: &'static str,
        value: usize,
        n: usize,
        hint: &'static str,
    },

    #[error(
        "{layer}: no PHM dimension in {candidates:?} divides both d = {d} and k = {k}; choose N dividing both d and k"
    )]
    NoPhmDimension {
        layer: String,
        d: usize,
        k: usize,
        candidates: Vec<usize>,
    },

    #[error("{layer}: batch norm running statistics are uninitialized; run a training-mode forward first")]
    UninitializedStats { layer: String },

    #[error("backward through `{op}` is not supported")]
    UnsupportedOp { op: String },

    #[error("non-finite value in {path}")]
    NonFinite { path: String },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("{}: corrupt file, expected {expected}, got {actual} bytes", path.display())]
    CorruptFile {
        path: PathBuf,
        expected: String,
        actual: u64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {field}: {msg}")]
    Config { field: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
