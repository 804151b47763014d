use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: input outside the domain of the operation ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("infeasible CTC alignment: target length {target} needs at least {needed} frames, got {frames}")]
    InfeasibleAlignment {
        target: usize,
        needed: usize,
        frames: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {kind}")]
    Format { path: PathBuf, kind: FormatError },

    #[error("non-finite value in `{tensor}` at step {step}")]
    NonFinite { tensor: String, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Distinct failure modes when parsing the binary feature and checkpoint files.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("trailing bytes after payload")]
    TrailingBytes,
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
