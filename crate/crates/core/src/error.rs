//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("tensor `{name}` has unsupported dtype `{dtype}` (only F32 is supported)")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("malformed vocabulary: {0}")]
    Vocab(String),

    #[error("token id {id} out of range (vocabulary size {n_vocab})")]
    TokenOutOfRange { id: u32, n_vocab: usize },

    #[error("sequence length {len} exceeds context window {n_ctx}")]
    SequenceTooLong { len: usize, n_ctx: usize },

    #[error("input is empty")]
    EmptyInput,

    #[error("`{0}` does not encode to a single token")]
    NotSingleToken(String),

    #[error("invalid hook site: {0}")]
    InvalidSite(String),

    #[error("invalid component: {0}")]
    InvalidComponent(String),

    #[error("sender `{sender}` is not strictly upstream of receiver `{receiver}`")]
    NonCausal { sender: String, receiver: String },

    #[error("target token `{word}` absent from instance {index}")]
    TargetAbsent { word: String, index: usize },

    #[error("{0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
