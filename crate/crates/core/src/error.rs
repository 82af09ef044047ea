use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // tensor format
    #[error("bad magic: file does not start with ZPTENSOR")]
    BadMagic,
    #[error("unsupported ZPT version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error("unsupported rank {0} (expected 1..=3)")]
    UnsupportedRank(usize),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("non-finite value at flat index {index}")]
    NonFinitePayload { index: usize },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("row {row} has zero norm")]
    ZeroRow { row: usize },
    #[error("row {row} is not unit-norm (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },

    // shapes and lengths
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    // prompt pools
    #[error("template {index} must contain exactly one `{{}}` placeholder: {template:?}")]
    InvalidTemplate { index: usize, template: String },
    #[error("duplicate template {template:?} at index {index}")]
    DuplicateTemplate { index: usize, template: String },
    #[error("empty class name at index {0}")]
    EmptyClassName(usize),
    #[error("class list is empty")]
    EmptyClassList,
    #[error("prompt pool is empty")]
    EmptyPool,

    // scoring
    #[error("normalization mode {0} requires pretrain logits")]
    MissingPretrain(&'static str),
    #[error("reference statistics computed for mode {stats}, requested {requested}")]
    ModeMismatch {
        stats: &'static str,
        requested: &'static str,
    },

    // ensembling and evaluation
    #[error("selection mask selects no prompts")]
    EmptyMask,
    #[error("label {label} at index {index} is out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: u32,
        classes: usize,
    },

    // diagnostics
    #[error("input vector is constant")]
    ConstantInput,
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn dims(message: impl Into<String>) -> Self {
        Error::DimMismatch(message.into())
    }
}
