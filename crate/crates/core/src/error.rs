//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, tightening, optimization and the
/// simulation harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent matrix/vector dimensions or invalid configuration values.
    #[error("configuration error: {0}")]
    Config(String),

    /// A matrix failed a required definiteness or symmetry check.
    #[error("validation error: {0}")]
    Validation(String),

    /// A scalar argument fell outside its admissible domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// The active constraint rows are linearly dependent (LICQ violated).
    #[error("LICQ violation: active constraint rows are rank deficient ({detail})")]
    LicqViolation { detail: String },

    /// The QP constraint set is empty. `rows` is the set of constraint rows
    /// binding at the phase-1 optimum, which jointly admit no feasible point.
    #[error("infeasible QP: no point satisfies all constraints (witness rows {rows:?}, min attainable violation {violation:.3e})")]
    Infeasible { rows: Vec<usize>, violation: f64 },

    /// The active-set iteration cap was exceeded.
    #[error("iteration limit: active-set solver exceeded {limit} iterations")]
    IterationLimit { limit: usize },

    /// An operation on an empty polytope that requires a nonempty one.
    #[error("empty polytope: {0}")]
    EmptyPolytope(String),

    /// A polytope is unbounded where boundedness is required.
    #[error("unbounded polytope: {0}")]
    Unbounded(String),

    /// A configuration combination the artifact deliberately rejects.
    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
