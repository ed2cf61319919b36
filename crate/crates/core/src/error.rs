use alloc::string::String;

/// Errors raised by core operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("could not place object {object} after {attempts} attempts")]
    Placement { object: usize, attempts: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("no consensus: best line had {found} inliers, need {required}")]
    NoConsensus { found: usize, required: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite loss at step {step}: {what}")]
    NonFinite { step: usize, what: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
