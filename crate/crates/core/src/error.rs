use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: non-positive input {value}")]
    NonPositive { op: &'static str, value: f64 },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("degenerate embedding: row {row} has zero norm")]
    DegenerateEmbedding { row: usize },

    #[error("degenerate SBM: generated graph has no edges")]
    DegenerateSbm,

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    // the io error is part of the message rather than a source so error
    // chains do not print it twice
    #[error("{}: {err}", path.display())]
    Io { path: PathBuf, err: std::io::Error },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {}: non-finite loss", .0.epoch)]
    Diverged(Box<crate::training::Divergence>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            err: source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
