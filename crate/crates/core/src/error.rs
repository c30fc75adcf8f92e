use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {left:?} vs {right:?}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("backward called before forward")]
    NotEvaluated,

    #[error("backward target must be a scalar, node {node} has shape {shape:?}")]
    NonScalarTarget { node: usize, shape: Vec<usize> },

    #[error("unknown node {0}")]
    UnknownNode(usize),

    #[error("pooling cannot upsample: out_side {out_side} > in_side {in_side}")]
    Upsample { in_side: usize, out_side: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { id: usize, vocab: usize },

    #[error("missing argmax record for max-pool structural map")]
    MissingArgmax,

    #[error("missing {tap} gradients at step {step}")]
    MissingGradient { step: usize, tap: String },

    #[error("generation record holds no steps")]
    EmptyRecord,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("bad magic in trace file")]
    BadMagic,

    #[error("unsupported trace format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload in record `{0}`")]
    Truncated(String),

    #[error("duplicate record name `{0}`")]
    DuplicateName(String),

    #[error("invalid record name `{0}`")]
    InvalidName(String),

    #[error("unknown dtype code {code} in record `{name}`")]
    UnknownDtype { name: String, code: u8 },

    #[error("non-finite value in record `{0}`")]
    NonFinite(String),

    #[error("missing record `{0}`")]
    MissingRecord(String),

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
