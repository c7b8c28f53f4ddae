use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient for tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("index {index} out of range 0..{len} ({what})")]
    Index {
        what: &'static str,
        index: i64,
        len: usize,
    },

    #[error("{what}: {reason}")]
    Data { what: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {kind} at byte {offset}: {reason}")]
    Format {
        kind: &'static str,
        offset: u64,
        reason: String,
    },

    #[error("incompatible parameters for transfer: {0:?}")]
    Incompatible(Vec<String>),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn data(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Data { what: what.into(), reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn format(kind: &'static str, offset: usize, reason: impl Into<String>) -> Self {
        Self::Format { kind, offset: offset as u64, reason: reason.into() }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Self::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Self::Stage { stage: stage.into(), source: Box::new(self) }
    }
}
