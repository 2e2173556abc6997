use std::path::PathBuf;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left extents {lhs:?}, right extents {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} expects {expected}, got extents {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?} (needs {expected})")]
    DataLength {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    #[error("degenerate vector: norm {norm:.3e} is below {eps:.1e}")]
    DegenerateVector { norm: f64, eps: f64 },

    #[error("tensor has no node on the active tape (build it through tape ops or register it as a leaf)")]
    DetachedTensor,

    #[error("{context}: expected a scalar, got extents {got:?}")]
    NotScalar {
        context: &'static str,
        got: Vec<usize>,
    },

    #[error("head count mismatch: branch configured for {expected} heads, got {got}")]
    HeadCount { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("insufficient data: need {needed} {what}, have {have}")]
    InsufficientData {
        what: &'static str,
        needed: usize,
        have: usize,
    },

    #[error("loss became non-finite at step {step}")]
    NanLoss { step: usize },

    #[error("test classes overlap training classes: {overlap:?}")]
    ClassOverlap { overlap: Vec<usize> },

    #[error("length mismatch: {context} ({lhs} vs {rhs})")]
    LengthMismatch {
        context: &'static str,
        lhs: usize,
        rhs: usize,
    },

    #[error("invalid or unreadable file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
