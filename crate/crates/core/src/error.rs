use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the slot machine, the packed procedures,
/// the network and the logistic-regression trainers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("overflow: {needed} slots needed but only {available} available")]
    Overflow { needed: usize, available: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("kernel {kh}x{kw} does not fit in {rows}x{cols}")]
    KernelTooLarge {
        kh: usize,
        kw: usize,
        rows: usize,
        cols: usize,
    },

    #[error("unsupported stride {0}: only stride 1 is supported, larger strides need about h*w rotations to rebuild the packed layout")]
    UnsupportedStride(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: i64, classes: usize },

    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
