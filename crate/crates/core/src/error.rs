//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Propellant ran out: the post-step mass would not exceed the dry mass.
    #[error("fuel exhausted: mass {mass:.3} kg at or below dry mass {dry_mass:.3} kg")]
    FuelExhausted { mass: f64, dry_mass: f64 },

    /// A computation produced a non-finite value.
    #[error("non-finite value encountered in {context}")]
    NumericalError { context: &'static str },

    /// An input or state violated a hard bound.
    #[error("bounds violation: {0}")]
    BoundsViolation(String),

    /// Caller passed inconsistent arguments.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A problem definition cannot be transcribed or solved.
    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    /// A step inside a rollout failed; carries the failing step index.
    #[error("simulation failed at step {step}: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    /// The receding-horizon problem stayed infeasible after exhausting all
    /// slack escalations.
    #[error("demonstration infeasible at step {step} after {retries} slack retries")]
    DemonstrationInfeasible { step: usize, retries: usize },

    /// A batch solve ended without convergence; the report describes it.
    #[error("solver finished with status {status:?}")]
    SolveFailed {
        status: crate::trajopt::SolveStatus,
        report: Box<crate::trajopt::SolveReport>,
    },

    /// Malformed trajectory CSV; `line` is 1-based and counts the header.
    #[error("trajectory CSV error at line {line}, column `{column}`: {message}")]
    CsvFormat {
        line: usize,
        column: String,
        message: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
