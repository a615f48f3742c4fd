//! Crate-wide error type.
//!
//! Everything fallible in the library funnels into [`Error`]; the CLI maps
//! variants onto process exit codes (config/data/numerical).

use thiserror::Error;

/// Library error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation was given tensors whose shapes cannot be combined.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A configuration or argument value is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A perturbation exceeded the bound it claims to satisfy.
    #[error("perturbation bound violated: {0}")]
    BoundViolation(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// The perturbation search produced a non-finite objective.
    /// The trace collected up to the failing iteration is attached so the
    /// caller can dump it for diagnosis.
    #[error("search objective became non-finite at iteration {iter}")]
    NonFiniteObjective {
        iter: usize,
        trace: Vec<crate::search::TracePoint>,
    },

    /// Even the smallest Lagrange constant in the bracket produced a
    /// perturbation larger than the bound, so bisection has no feasible
    /// anchor.
    #[error(
        "infeasible lower bound: c = {c_lo:.3e} already yields max|dW| = {achieved_l:.3e} > {th_g:.3e}"
    )]
    InfeasibleLowerBound { c_lo: f64, achieved_l: f64, th_g: f64 },

    /// Checkpoint bytes do not form a valid container.
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
