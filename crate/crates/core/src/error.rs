use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} does not describe {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("operation `{0}` has no gradient")]
    UnsupportedOp(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("step {step} out of range for a schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },

    #[error("unknown word `{0}`")]
    UnknownWord(String),

    #[error("text of {words} words does not fit in {max_len} tokens")]
    TextOverflow { words: usize, max_len: usize },

    #[error("malformed token sequence: {0}")]
    MalformedSequence(String),

    #[error("label {label} out of range for {num_classes} classes")]
    ClassRange { label: usize, num_classes: usize },

    #[error("{path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("no maskable positions")]
    NothingToMask,

    #[error("empty mask set")]
    EmptyMask,

    #[error("query identity {0} has no match in the gallery")]
    MissingIdentity(usize),

    #[error("row {0} of the similarity target has no matches")]
    NoMatches(usize),

    #[error("configuration: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
