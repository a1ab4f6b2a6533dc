//! Error type shared across the toolkit.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate segment: {0}")]
    DegenerateSegment(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("anchor scale list is empty")]
    EmptyScales,

    #[error("candidate list is empty")]
    EmptyCandidates,

    #[error("no region: {0}")]
    EmptyRegion(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error at line {line}: {msg}")]
    Validation { line: usize, msg: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("training diverged at step {step}: loss = {value}")]
    Diverged { step: usize, value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
