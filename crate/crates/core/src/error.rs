use std::path::PathBuf;

use rnng_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("tree parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("invalid action sequence at step {step}: {msg}")]
    InvalidSequence { step: usize, msg: String },
    #[error("illegal action {action} for batch row {row}: {msg}")]
    IllegalAction {
        row: usize,
        action: String,
        msg: String,
    },
    #[error("stack depth overflow in row {row}: pointer would reach {needed} with bound {bound}")]
    DepthOverflow { row: usize, needed: usize, bound: usize },
    #[error("stack state invariant violated in row {row}: {msg}")]
    State { row: usize, msg: String },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad data: {0}")]
    Data(String),
    #[error("beam search found no continuation for sentence {sentence} at token {token}")]
    BeamExhausted { sentence: usize, token: usize },
    #[error("sentence {sentence}: no hypothesis reached token {token} within {cap} structural actions")]
    StructuralCap {
        sentence: usize,
        token: usize,
        cap: usize,
    },
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },
    #[error("sampling did not complete within {0} actions")]
    SampleExhausted(usize),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
