use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: invalid input: {reason}")]
    InvalidInput { op: &'static str, reason: String },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward called on a tape with no recorded operations")]
    EmptyTape,

    #[error("gradient check: {0}")]
    NonDifferentiable(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("set {set_id} references unknown item {item_id}")]
    DanglingReference { set_id: String, item_id: String },

    #[error("invalid style set {set_id}: {reason}")]
    InvalidSet { set_id: String, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient item pool: need {needed} candidates outside the set, have {available}")]
    InsufficientPool { needed: usize, available: usize },

    #[error("missing vector for item {0}")]
    MissingVector(String),

    #[error("unknown item {0}")]
    MissingItem(String),

    #[error("no candidates left after exclusion and filtering")]
    EmptyCandidates,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("class {0} is missing from a split")]
    ClassMissing(String),

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidInput {
            op,
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::NonFinite { .. })
    }
}
