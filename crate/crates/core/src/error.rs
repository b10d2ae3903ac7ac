use thiserror::Error;

/// Errors produced by solvers and matrix kernels.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// A Cholesky pivot fell below tolerance, so the input is singular or
    /// indefinite.
    #[error("matrix is not positive definite ({context}): pivot {pivot:.3e} at index {index}")]
    NotPositiveDefinite {
        context: &'static str,
        pivot: f64,
        index: usize,
    },

    /// An eigenvalue fell below the negativity tolerance for a PSD input.
    #[error("matrix is indefinite: min eigenvalue {min_eigenvalue:.3e} below tolerance {tolerance:.3e}")]
    IndefiniteInput { min_eigenvalue: f64, tolerance: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The design matrix has rank n, so no REML contrast exists.
    #[error("design matrix has full row rank; no null-space contrast exists")]
    FullRowRank,

    /// The assembled covariance could not be factored; the iterate left the
    /// positive definite region.
    #[error("assembled covariance is singular: {0}")]
    SingularOmega(String),

    #[error("design matrix is rank deficient")]
    RankDeficientDesign,

    /// tr(Omega^-1 V_i) <= 0 for an active component, violating the positive
    /// diagonal assumption.
    #[error("nonpositive trace denominator {value:.3e} for component {index}")]
    ZeroDenominator { index: usize, value: f64 },

    #[error("variance basis {index} has rank zero")]
    ZeroRank { index: usize },

    #[error("step halving failed to find an ascent point after {attempts} attempts")]
    LineSearchFailed { attempts: usize },

    /// Rate diagnostics require an interior point.
    #[error("component {index} is on the boundary (sigma2 = {value:.3e})")]
    BoundaryPoint { index: usize, value: f64 },

    #[error("MAP quadratic has no positive root for component {index}")]
    NoPositiveRoot { index: usize },

    #[error("quartic root finder failed for component {index}: {reason}")]
    QuarticSolverFailed { index: usize, reason: String },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

pub type Result<T> = std::result::Result<T, Error>;
