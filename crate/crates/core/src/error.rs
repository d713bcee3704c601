use std::io;

/// Errors produced by the differflow core.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown graph input `{0}`")]
    UnknownInput(String),

    #[error("missing graph input `{0}`")]
    MissingInput(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("not differentiable: {0}")]
    NotDifferentiable(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
