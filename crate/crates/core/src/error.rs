//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, VfgError>;

#[derive(Debug, Error)]
pub enum VfgError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {what}")]
    NonFinite { what: String },

    #[error("graph spec parse error: {0}")]
    GraphParse(String),

    #[error("graph validation failed: {}", issues.join("; "))]
    GraphInvalid { issues: Vec<String> },

    #[error("message passing error: {0}")]
    Message(String),

    #[error("objective error: {0}")]
    Objective(String),

    #[error("training aborted at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("inference error: {0}")]
    Inference(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid config: {0}")]
    Config(String),
}
