use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("matrix data length {len} does not match {rows}x{cols}")]
    DataLength {
        rows: usize,
        cols: usize,
        len: usize,
    },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("token id {id} at position {pos} is out of range for vocab size {vocab_size}")]
    TokenOutOfRange {
        id: u32,
        pos: usize,
        vocab_size: usize,
    },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("sequence too short: need at least {need} tokens, got {got}")]
    SequenceTooShort { need: usize, got: usize },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("truncated payload: header describes {expected} bytes, file holds {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    #[error("trailing bytes: header describes {expected} payload bytes, file holds {actual}")]
    TrailingBytes { expected: usize, actual: usize },

    #[error("{path}:{line}: invalid JSON: {message}")]
    JsonLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: missing field `{field}`")]
    MissingField {
        path: PathBuf,
        line: usize,
        field: &'static str,
    },

    #[error("no document has at least {need} tokens")]
    NoLongDocument { need: usize },

    #[error("empty calibration set")]
    EmptyCalibration,

    #[error("no activation statistics for layer `{0}`")]
    MissingStats(String),

    #[error("layer `{0}` has no gram matrix; collect stats with gram enabled")]
    MissingGram(String),

    #[error("infeasible sparsity bounds: {0}")]
    InfeasibleBounds(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f32 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
