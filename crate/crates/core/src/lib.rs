//! Self-exploration pipeline for step-wise tool-usage preference data.
//!
//! Tasks are synthesized from seed queries, explored step by step by
//! sampling several candidate actions and letting a verifier pick the best,
//! and every rejected sibling becomes a preference pair. The [`dpo`] module
//! holds the preference objective and a tabular policy to exercise it; the
//! [`stats`] module computes dataset diagnostics.

pub mod canonical;
pub mod config;
pub mod dpo;
pub mod executor;
pub mod explorer;
pub mod gateway;
pub mod model;
pub mod orchestrator;
pub mod prompts;
pub mod sim;
pub mod stats;
pub mod store;
pub mod taskforge;
pub mod verifier;

use thiserror::Error;

pub use model::*;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invariant violation: {}", .0.join("; "))]
    InvariantViolation(Vec<String>),
    #[error("invalid status transition {from:?} -> {to:?}")]
    InvalidTransition { from: TaskStatus, to: TaskStatus },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
