use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("length mismatch: {0} logit rows for {1} targets")]
    LengthMismatch(usize, usize),

    #[error("malformed VRLE record: {0}")]
    MalformedRle(String),

    #[error("malformed VRAW file: {0}")]
    MalformedRaw(String),

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("query is unsatisfiable: {0}")]
    Unsatisfiable(String),

    #[error("no number in response {0:?}")]
    NoNumber(String),

    #[error("no responses to aggregate")]
    EmptyResponses,

    #[error("resolution {width}x{height} is not divisible by patch size {patch}")]
    IndivisibleResolution { width: usize, height: usize, patch: usize },

    #[error("generated answer contains no SEG token")]
    NoSegToken,

    #[error("non-finite loss at step {step}: l_txt={l_txt} l_bce={l_bce} l_dice={l_dice}")]
    NonFiniteLoss { step: usize, l_txt: f64, l_bce: f64, l_dice: f64 },

    #[error("query {0} is not a negative query")]
    NonNegativeQuery(String),

    #[error("missing prediction for record {0}")]
    MissingPrediction(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown word {0:?}")]
    UnknownWord(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub(crate) fn dims(expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch { expected: expected.to_string(), found: found.to_string() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Whether this error is caused by bad numerics rather than bad input data.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. })
    }
}
