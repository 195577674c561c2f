use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid head: {0}")]
    InvalidHead(String),

    #[error("{0:?} has no elementwise jacobian")]
    UnsupportedActivation(crate::activations::ActivationKind),

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("dense reference path refused: {params} parameters exceeds cap {cap}")]
    ReferenceTooLarge { params: usize, cap: usize },

    #[error("finite-difference oracle failed at coordinate {index}: f evaluated to {value}")]
    OracleFailure { index: usize, value: f64 },

    #[error("{path}: byte offset {offset}: {msg}")]
    Ingestion { path: PathBuf, offset: u64, msg: String },

    #[error("config {path}: field `{field}`: {msg}")]
    Config { path: PathBuf, field: String, msg: String },

    #[error("model container: {0}")]
    Container(String),

    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },

    #[error("pre-training gradient check failed: {0}")]
    GradCheckGate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
