use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is at or below the normalization floor")]
    DegenerateVector { norm: f64 },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("score set is empty")]
    EmptyScores,
    #[error("invalid dimension {0}: at least 2 required")]
    InvalidDimension(usize),
    #[error("{name} = {value} is outside its allowed range")]
    InvalidFraction { name: &'static str, value: f64 },
    #[error("split leaves the labeled set empty")]
    EmptyLabeledSet,
    #[error("batch of {requested} requested but only {available} samples available")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("parse error at {at}: {message}")]
    Parse { at: String, message: String },
    #[error("dimension mismatch at line {line}: expected {expected} features, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("tape does not belong to this network: {0}")]
    TapeMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("anchor has an empty positive set")]
    EmptyPositiveSet,
    #[error("invalid class prior: {0}")]
    InvalidPrior(String),
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error("evaluation set is empty")]
    EmptyEvaluationSet,
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}
