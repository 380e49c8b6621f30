//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible matrix shapes; names both operands.
    #[error("shape mismatch in {op}: left is {lhs:?}, right is {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    /// Argument outside its documented domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed input file (IDX container, WDBC CSV, checkpoint).
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// API misuse: forward/backward invoked on mismatched model state.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite gradient detected; the optimizer refuses to step.
    #[error("poisoned gradients in parameter '{param}' at flat index {index}")]
    PoisonedGradients { param: String, index: usize },

    /// Training produced a non-finite loss and was aborted.
    #[error("run diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
