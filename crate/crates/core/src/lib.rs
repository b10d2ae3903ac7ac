//! Variance components estimation by minorization-maximization.
//!
//! The crate fits the model `y ~ N(X beta, Omega)` with
//! `Omega = sum_i sigma_i^2 V_i` for known PSD bases `V_i`, by multiplicative
//! MM updates, with EM and safeguarded Fisher-scoring baselines, quasi-Newton
//! acceleration, REML, a Kronecker-structured multivariate-response variant,
//! MAP/ridge/lasso penalized estimation, and a benchmark harness for
//! convergence comparisons.

pub mod accel;
pub mod baselines;
pub mod error;
pub mod linalg;
pub mod mm;
pub mod model;
pub mod mvt;
pub mod penalized;
pub mod simulate;

pub use error::{Error, Result};
pub use linalg::{CongruencePair, SymMatrix};
pub use mm::{fit, fit_reml, fit_two_vc, FitResult, SolverConfig, Strategy};
pub use model::{FitTrace, OmegaFactor, Parameters, VarCompProblem};
pub use mvt::{fit_mvt, fit_mvt_two_vc, MultiVarCompProblem, MvtParameters};
pub use penalized::PenaltySpec;
