use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("target index {index} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { index: usize, vocab: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("token id {id} is outside the {space} id space")]
    IdOutOfSpace { id: usize, space: &'static str },
    #[error("length violation: {0}")]
    Length(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    Overlength { len: usize, max: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("suspicion statistics are not fitted")]
    UnfittedStats,
    #[error("re-measurement failed for record {record_id}: {message}")]
    Remeasure { record_id: u64, message: String },
    #[error("too few samples: need {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("query {query}: truth index {index} invalid for {candidates} candidates")]
    InvalidTruth {
        query: usize,
        index: usize,
        candidates: usize,
    },
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint digest mismatch")]
    Digest,
    #[error("reports share no metric columns")]
    NoOverlap,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Stable machine-readable prefix printed by the CLI as `CODE: message`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ErrorCode(&'static str);

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0)
    }
}

impl Error {
    pub fn code(&self) -> ErrorCode {
        ErrorCode(match self {
            Error::ShapeMismatch { .. } | Error::InvalidShape(_) => "E_SHAPE",
            Error::NonFinite { .. } => "E_NONFINITE",
            Error::TargetOutOfRange { .. } => "E_TARGET",
            Error::NonScalarLoss(_) => "E_NONSCALAR",
            Error::TapeConsumed => "E_TAPE",
            Error::MissingGrad(_) => "E_NOGRAD",
            Error::UnknownWord(_) => "E_UNKNOWN_WORD",
            Error::IdOutOfSpace { .. } => "E_ID_SPACE",
            Error::Length(_) => "E_LENGTH",
            Error::Overlength { .. } => "E_OVERLENGTH",
            Error::EmptyBatch => "E_EMPTY_BATCH",
            Error::OutOfRange(_) => "E_RANGE",
            Error::UnfittedStats => "E_UNFITTED",
            Error::Remeasure { .. } => "E_REMEASURE",
            Error::TooFewSamples { .. } => "E_TOO_FEW",
            Error::InvalidTruth { .. } => "E_TRUTH",
            Error::Config { .. } => "E_CONFIG",
            Error::Format { .. } => "E_FORMAT",
            Error::Version { .. } => "E_VERSION",
            Error::Digest => "E_DIGEST",
            Error::NoOverlap => "E_NO_OVERLAP",
            Error::NonFiniteLoss { .. } => "E_NONFINITE_LOSS",
            Error::Io(_) => "E_IO",
        })
    }

    pub(crate) fn format(what: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            what,
            message: message.into(),
        }
    }
}
