//! In-context multiclass classification bench.
//!
//! The crate builds, end to end, the pieces needed to measure task-scaling
//! behaviour of in-context classifiers with exactly known ground truth:
//!
//! - [`numerics`]: dense `f64` matrices, a reverse-mode tape, and seeded,
//!   labelled random streams.
//! - [`models`]: the hardmax transformer encoder, the constrained biased-ReLU
//!   MLP, and the softmax classifier with an output clamp that keeps every
//!   predicted probability above `eps / (2K)`.
//! - [`tasks`]: synthetic prompt families whose conditional class
//!   probabilities are available in closed form, plus small-value-bound
//!   diagnostics.
//! - [`risk`]: cross-entropy, the truncated KL risk, and executable checkers
//!   for the divergence inequalities the analysis leans on.
//! - [`complexity`]: closed-form metric-entropy / pseudo-dimension evaluators
//!   and a brute-force covering oracle for tiny families.
//! - [`train`]: seeded minibatch ERM with magnitude pruning and a
//!   restart-based surrogate for the empirical risk gap.
//! - [`experiment`]: the task-scaling study with log-log slope fitting and a
//!   deterministic per-cell seeding scheme.
//!
//! Everything is `f64`, deterministic under a fixed seed, and covered by an
//! acceptance suite (`tests/acceptance.rs`) that pins every tolerance.

pub mod complexity;
pub mod experiment;
pub mod models;
pub mod numerics;
pub mod risk;
pub mod tasks;
pub mod train;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or sizes that cannot be combined (a configuration error).
    #[error("dimension mismatch: {0}")]
    Shape(String),
    /// Invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),
    /// An API contract was violated (e.g. gradient of a non-scalar node).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A numeric precondition failed at runtime (non-finite loss, zero mass).
    #[error("numeric fault: {0}")]
    Numeric(String),
    /// Config / file schema problem; names the offending field where known.
    #[error("schema error: {0}")]
    Schema(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
