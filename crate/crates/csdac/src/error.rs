//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the simulation, training, and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    /// An input carried a NaN or infinity where a finite value is required.
    #[error("non-finite input in {context}")]
    NonFinite { context: &'static str },

    /// A physical or configuration value is outside its valid domain.
    #[error("invalid {what}: {why}")]
    Domain { what: &'static str, why: String },

    /// Configuration file or override could not be parsed / validated.
    #[error("config error: {0}")]
    Config(String),

    /// An allocation problem has no feasible solution under the power caps.
    #[error("infeasible allocation: {0}")]
    Infeasible(String),

    /// An iterative solver failed to converge within its iteration budget.
    #[error("{solver} did not converge within {max_iters} iterations (residual {residual:.3e})")]
    NoConvergence {
        solver: &'static str,
        max_iters: usize,
        residual: f64,
    },

    /// Training aborted because a loss or parameter became non-finite.
    #[error("training diverged at iteration {iteration}: {what}")]
    Diverged { iteration: usize, what: String },

    /// A checkpoint file is malformed or from an unsupported version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A problem instance is too large for exhaustive enumeration.
    #[error("instance too large to enumerate: {combinations} combinations exceeds the {limit} limit")]
    TooLarge { combinations: u64, limit: u64 },

    /// Malformed row in an input data file.
    #[error("malformed input in {path} at row {row}: {why}")]
    MalformedRow {
        path: String,
        row: usize,
        why: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
