//! Problem data model and likelihood machinery: covariance assembly,
//! log-likelihood and score evaluation, GLS mean update, and KKT residual.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, CholFactor, SymMatrix};

/// A univariate-response variance components problem:
/// `y ~ N(X beta, sum_i sigma_i^2 V_i)`.
///
/// `X` is optional; when absent the model is mean-free (the REML-style
/// projected problem has this form). The bases `V_i` must be symmetric PSD.
#[derive(Debug, Clone)]
pub struct VarCompProblem {
    y: DVector<f64>,
    x: Option<DMatrix<f64>>,
    v: Vec<SymMatrix>,
    ranks: OnceLock<Vec<usize>>,
}

impl VarCompProblem {
    /// Validate and build a problem. Checks dimension consistency, PSD-ness
    /// of every basis, and (when `X` is present) full column rank with
    /// `p < n`.
    pub fn new(y: DVector<f64>, x: Option<DMatrix<f64>>, v: Vec<SymMatrix>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::InvalidProblem("empty response vector".into()));
        }
        if !y.iter().all(|t| t.is_finite()) {
            return Err(Error::NonFinite("response vector".into()));
        }
        if v.is_empty() {
            return Err(Error::InvalidProblem(
                "at least one variance basis is required".into(),
            ));
        }
        let mut ranks = Vec::with_capacity(v.len());
        for (i, vi) in v.iter().enumerate() {
            if vi.order() != n {
                return Err(Error::DimensionMismatch(format!(
                    "basis {} has order {}, expected {}",
                    i,
                    vi.order(),
                    n
                )));
            }
            ranks.push(linalg::check_psd(vi)?);
        }
        if let Some(ref xm) = x {
            if xm.nrows() != n {
                return Err(Error::DimensionMismatch(format!(
                    "design has {} rows, expected {}",
                    xm.nrows(),
                    n
                )));
            }
            let p = xm.ncols();
            if p >= n {
                return Err(Error::InvalidProblem(format!(
                    "design must be strictly tall: p = {p}, n = {n}"
                )));
            }
            if p > 0 && design_rank(xm) < p {
                return Err(Error::RankDeficientDesign);
            }
        }
        let cell = OnceLock::new();
        cell.set(ranks).ok();
        Ok(Self { y, x, v, ranks: cell })
    }

    /// Build a problem from parts already known to satisfy the invariants
    /// (used by the generators, which construct PSD bases directly).
    pub(crate) fn from_validated_parts(
        y: DVector<f64>,
        x: Option<DMatrix<f64>>,
        v: Vec<SymMatrix>,
        ranks: Option<Vec<usize>>,
    ) -> Self {
        let cell = OnceLock::new();
        if let Some(r) = ranks {
            cell.set(r).ok();
        }
        Self { y, x, v, ranks: cell }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of variance components `m`.
    pub fn n_components(&self) -> usize {
        self.v.len()
    }

    /// Number of fixed effects (0 when `X` is absent).
    pub fn n_fixed(&self) -> usize {
        self.x.as_ref().map_or(0, |x| x.ncols())
    }

    pub fn response(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn design(&self) -> Option<&DMatrix<f64>> {
        self.x.as_ref()
    }

    pub fn bases(&self) -> &[SymMatrix] {
        &self.v
    }

    /// `rank(V_i)` for every basis, computed once by eigenvalue thresholding.
    pub fn ranks(&self) -> &[usize] {
        self.ranks
            .get_or_init(|| self.v.iter().map(|vi| linalg::psd_rank(vi.matrix())).collect())
    }

    /// `y - X beta` (a copy of `y` when `X` is absent).
    pub fn residual(&self, beta: &DVector<f64>) -> DVector<f64> {
        match self.x {
            Some(ref x) if x.ncols() > 0 => &self.y - x * beta,
            _ => self.y.clone(),
        }
    }

    /// Replace the response, keeping the validated structure.
    pub fn with_response(&self, y: DVector<f64>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "replacement response has length {}, expected {}",
                y.len(),
                self.n()
            )));
        }
        if !y.iter().all(|t| t.is_finite()) {
            return Err(Error::NonFinite("response vector".into()));
        }
        let mut out = self.clone();
        out.y = y;
        Ok(out)
    }
}

fn design_rank(x: &DMatrix<f64>) -> usize {
    let gram = x.transpose() * x;
    linalg::psd_rank(&gram)
}

/// Mean and variance parameters of a univariate problem.
///
/// `beta` is empty when the problem has no design; `sigma2` entries are
/// nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub beta: DVector<f64>,
    pub sigma2: DVector<f64>,
}

impl Parameters {
    pub fn new(beta: DVector<f64>, sigma2: DVector<f64>) -> Self {
        Self { beta, sigma2 }
    }

    /// Mean-free parameters.
    pub fn variance_only(sigma2: DVector<f64>) -> Self {
        Self {
            beta: DVector::zeros(0),
            sigma2,
        }
    }
}

/// Assembled covariance `Omega = sum_i sigma_i^2 V_i` with its Cholesky
/// factor and log determinant.
#[derive(Debug, Clone)]
pub struct OmegaFactor {
    pub omega: SymMatrix,
    pub chol: CholFactor,
    pub log_det: f64,
}

impl OmegaFactor {
    /// `Omega^{-1} b` via triangular solves.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve_vec(b)
    }

    /// Explicit symmetric `Omega^{-1}`.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Assemble and factor `Omega(sigma2)`.
///
/// Errors with [`Error::SingularOmega`] when the Cholesky factorization
/// fails, signalling that the iterate left the positive definite region.
pub fn assemble_omega(problem: &VarCompProblem, sigma2: &DVector<f64>) -> Result<OmegaFactor> {
    let m = problem.n_components();
    if sigma2.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "sigma2 has length {}, expected {}",
            sigma2.len(),
            m
        )));
    }
    if sigma2.iter().any(|&s| s < 0.0 || !s.is_finite()) {
        return Err(Error::InvalidProblem(
            "sigma2 must be nonnegative and finite".into(),
        ));
    }
    let n = problem.n();
    let mut omega = DMatrix::zeros(n, n);
    for (s, vi) in sigma2.iter().zip(problem.bases()) {
        if *s != 0.0 {
            omega.axpy(*s, vi.matrix(), 1.0);
        }
    }
    let chol = CholFactor::factor(&omega, "assemble_omega").map_err(|e| match e {
        Error::NotPositiveDefinite { pivot, index, .. } => Error::SingularOmega(format!(
            "Cholesky pivot {pivot:.3e} at index {index}"
        )),
        other => other,
    })?;
    let log_det = chol.log_det();
    Ok(OmegaFactor {
        omega: SymMatrix::from_symmetric_unchecked(omega),
        chol,
        log_det,
    })
}

/// Log-likelihood `-1/2 ln det Omega - 1/2 r^T Omega^{-1} r` with
/// `r = y - X beta`. The `-(n/2) ln(2 pi)` constant is omitted; comparisons
/// against other packages must subtract constants accordingly.
pub fn log_likelihood(problem: &VarCompProblem, params: &Parameters) -> Result<f64> {
    let omega = assemble_omega(problem, &params.sigma2)?;
    Ok(log_likelihood_with(problem, params, &omega))
}

/// Log-likelihood reusing an already assembled factor.
pub fn log_likelihood_with(
    problem: &VarCompProblem,
    params: &Parameters,
    omega: &OmegaFactor,
) -> f64 {
    let r = problem.residual(&params.beta);
    let w = omega.solve_vec(&r);
    -0.5 * omega.log_det - 0.5 * r.dot(&w)
}

/// Shared per-iteration quantities: the explicit inverse, the traces
/// `T_i = tr(Omega^{-1} V_i)`, and the quadratic forms
/// `q_i = r^T Omega^{-1} V_i Omega^{-1} r`.
///
/// These are the building blocks of the MM and EM updates, the score, and
/// the local rate diagnostics.
#[derive(Debug, Clone)]
pub struct StepQuantities {
    pub omega_inv: DMatrix<f64>,
    pub weighted_residual: DVector<f64>,
    pub traces: Vec<f64>,
    pub quad_forms: Vec<f64>,
}

pub fn step_quantities(
    problem: &VarCompProblem,
    params: &Parameters,
    omega: &OmegaFactor,
) -> Result<StepQuantities> {
    let omega_inv = omega.inverse();
    let r = problem.residual(&params.beta);
    let w = omega.solve_vec(&r);
    let mut traces = Vec::with_capacity(problem.n_components());
    let mut quad_forms = Vec::with_capacity(problem.n_components());
    for vi in problem.bases() {
        traces.push(linalg::hadamard_trace_raw(&omega_inv, vi.matrix())?);
        quad_forms.push((vi.matrix() * &w).dot(&w));
    }
    Ok(StepQuantities {
        omega_inv,
        weighted_residual: w,
        traces,
        quad_forms,
    })
}

/// Score vector: component `i` equals
/// `-1/2 tr(Omega^{-1} V_i) + 1/2 r^T Omega^{-1} V_i Omega^{-1} r`.
pub fn score_sigma2(problem: &VarCompProblem, params: &Parameters) -> Result<DVector<f64>> {
    let omega = assemble_omega(problem, &params.sigma2)?;
    let q = step_quantities(problem, params, &omega)?;
    Ok(score_from_quantities(&q))
}

pub(crate) fn score_from_quantities(q: &StepQuantities) -> DVector<f64> {
    DVector::from_iterator(
        q.traces.len(),
        q.traces
            .iter()
            .zip(&q.quad_forms)
            .map(|(t, qf)| 0.5 * (qf - t)),
    )
}

/// Generalized least squares solve for the mean:
/// `beta = (X^T Omega^{-1} X)^{-1} X^T Omega^{-1} y`.
pub fn gls_beta(problem: &VarCompProblem, omega: &OmegaFactor) -> Result<DVector<f64>> {
    let x = problem
        .design()
        .ok_or_else(|| Error::InvalidProblem("GLS requires a design matrix".into()))?;
    let p = x.ncols();
    if p == 0 {
        return Ok(DVector::zeros(0));
    }
    let wx = omega.chol.solve_mat(x); // Omega^{-1} X
    let normal = SymMatrix::symmetrize(&(x.transpose() * &wx));
    let rhs = wx.transpose() * problem.response();
    let chol = CholFactor::factor(normal.matrix(), "gls normal equations")
        .map_err(|_| Error::RankDeficientDesign)?;
    Ok(chol.solve_vec(&rhs))
}

/// KKT residual: `max_i |score_i|` over interior components and
/// `max(score_i, 0)` over boundary components, using the activity
/// threshold `1e-10 * max_i sigma_i^2`.
pub fn kkt_residual(problem: &VarCompProblem, params: &Parameters) -> Result<f64> {
    let score = score_sigma2(problem, params)?;
    Ok(kkt_from_score(&params.sigma2, &score))
}

pub(crate) fn kkt_from_score(sigma2: &DVector<f64>, score: &DVector<f64>) -> f64 {
    let sigma_tol = 1e-10 * sigma2.iter().fold(0.0f64, |acc, &s| acc.max(s));
    sigma2
        .iter()
        .zip(score.iter())
        .map(|(&s, &g)| if s > sigma_tol { g.abs() } else { g.max(0.0) })
        .fold(0.0f64, f64::max)
}

/// Per-iteration fit diagnostics.
///
/// For ascent solvers the objective sequence is nondecreasing to within a
/// small absolute slack.
#[derive(Debug, Clone)]
pub struct FitTrace {
    /// Objective value per iteration, starting with the initial point. For
    /// penalized fits this is the penalized objective.
    pub objective: Vec<f64>,
    /// Number of parameter updates performed.
    pub iterations: usize,
    pub wall_time: std::time::Duration,
    /// KKT residual at the final point (of the problem actually iterated,
    /// i.e. the projected problem for REML).
    pub kkt_residual: f64,
    pub converged: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    pub(crate) fn random_problem(
        n: usize,
        m: usize,
        with_design: bool,
        rng: &mut ChaCha20Rng,
    ) -> VarCompProblem {
        let mut v = Vec::with_capacity(m);
        for _ in 0..m - 1 {
            let g = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            v.push(SymMatrix::symmetrize(&(&g * g.transpose())));
        }
        v.push(SymMatrix::identity(n));
        let y = DVector::from_fn(n, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let x = with_design.then(|| DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i as f64) / n as f64 }));
        VarCompProblem::new(y, x, v).unwrap()
    }

    #[test]
    fn assemble_simple_cases() {
        let y = DVector::zeros(2);
        let p = VarCompProblem::new(y.clone(), None, vec![SymMatrix::identity(2)]).unwrap();
        let f = assemble_omega(&p, &DVector::from_vec(vec![3.0])).unwrap();
        assert_relative_eq!(f.omega[(0, 0)], 3.0);
        assert_relative_eq!(f.log_det, 2.0 * 3.0f64.ln(), epsilon = 1e-14);

        let v2 = SymMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0])))
            .unwrap();
        let p = VarCompProblem::new(y, None, vec![SymMatrix::identity(2), v2]).unwrap();
        let f = assemble_omega(&p, &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_relative_eq!(f.omega[(0, 0)], 2.0);
        assert_relative_eq!(f.omega[(1, 1)], 1.0);
    }

    #[test]
    fn assemble_log_det_matches_eigen_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let p = random_problem(6, 3, false, &mut rng);
        let s = DVector::from_vec(vec![0.5, 1.5, 2.0]);
        let f = assemble_omega(&p, &s).unwrap();
        let (vals, _) = crate::linalg::sym_eigen_sorted(f.omega.matrix());
        let oracle: f64 = vals.iter().map(|v| v.ln()).sum();
        assert_relative_eq!(f.log_det, oracle, epsilon = 1e-10);
    }

    #[test]
    fn assemble_rejects_singular() {
        let y = DVector::zeros(2);
        let v = SymMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0])))
            .unwrap();
        let p = VarCompProblem::new(y, None, vec![v]).unwrap();
        assert!(matches!(
            assemble_omega(&p, &DVector::from_vec(vec![1.0])),
            Err(Error::SingularOmega(_))
        ));
    }

    #[test]
    fn log_likelihood_scalar_cases() {
        // n=1, V=(1), sigma2=1, y=0 -> 0
        let p = VarCompProblem::new(
            DVector::from_vec(vec![0.0]),
            None,
            vec![SymMatrix::identity(1)],
        )
        .unwrap();
        let params = Parameters::variance_only(DVector::from_vec(vec![1.0]));
        assert_relative_eq!(log_likelihood(&p, &params).unwrap(), 0.0);

        // sigma2 = e -> -1/2 from the log-det term
        let params = Parameters::variance_only(DVector::from_vec(vec![std::f64::consts::E]));
        assert_relative_eq!(log_likelihood(&p, &params).unwrap(), -0.5, epsilon = 1e-15);
    }

    #[test]
    fn log_likelihood_matches_explicit_inverse_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let p = random_problem(4, 2, false, &mut rng);
        let params = Parameters::variance_only(DVector::from_vec(vec![0.8, 1.7]));
        let ll = log_likelihood(&p, &params).unwrap();

        // oracle: explicit inverse and eigenvalue log-determinant
        let omega = p.bases()[0].matrix() * 0.8 + p.bases()[1].matrix() * 1.7;
        let inv = omega.clone().try_inverse().unwrap();
        let (vals, _) = crate::linalg::sym_eigen_sorted(&omega);
        let logdet: f64 = vals.iter().map(|v| v.ln()).sum();
        let r = p.response();
        let oracle = -0.5 * logdet - 0.5 * (r.transpose() * inv * r)[(0, 0)];
        assert_relative_eq!(ll, oracle, epsilon = 1e-10);
    }

    #[test]
    fn log_likelihood_invariant_under_component_permutation() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let p = random_problem(5, 3, false, &mut rng);
        let s = DVector::from_vec(vec![0.3, 1.1, 2.5]);
        let ll = log_likelihood(&p, &Parameters::variance_only(s)).unwrap();

        let permuted = VarCompProblem::new(
            p.response().clone(),
            None,
            vec![p.bases()[2].clone(), p.bases()[0].clone(), p.bases()[1].clone()],
        )
        .unwrap();
        let s_perm = DVector::from_vec(vec![2.5, 0.3, 1.1]);
        let ll_perm = log_likelihood(&permuted, &Parameters::variance_only(s_perm)).unwrap();
        assert_relative_eq!(ll, ll_perm, epsilon = 1e-12);
    }

    #[test]
    fn score_stationary_and_hand_cases() {
        // m=1, V=I, sigma2=1, y'y = n -> score 0
        let y = DVector::from_vec(vec![1.0, -1.0, 1.0, -1.0]);
        let p = VarCompProblem::new(y, None, vec![SymMatrix::identity(4)]).unwrap();
        let params = Parameters::variance_only(DVector::from_vec(vec![1.0]));
        let s = score_sigma2(&p, &params).unwrap();
        assert_relative_eq!(s[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(kkt_residual(&p, &params).unwrap(), 0.0, epsilon = 1e-14);

        // m=1, V=I2, sigma2=1, y=(2,0): -1 + 2 = 1
        let p = VarCompProblem::new(
            DVector::from_vec(vec![2.0, 0.0]),
            None,
            vec![SymMatrix::identity(2)],
        )
        .unwrap();
        let s = score_sigma2(&p, &params).unwrap();
        assert_relative_eq!(s[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..10 {
            let n = rng.random_range(4..=12);
            let m = rng.random_range(2..=4);
            let p = random_problem(n, m, false, &mut rng);
            let sigma2 =
                DVector::from_fn(m, |_, _| 0.5 + rng.random::<f64>());
            let params = Parameters::variance_only(sigma2.clone());
            let score = score_sigma2(&p, &params).unwrap();
            let h = 1e-6;
            for i in 0..m {
                let mut up = sigma2.clone();
                up[i] += h;
                let mut dn = sigma2.clone();
                dn[i] -= h;
                let fd = (log_likelihood(&p, &Parameters::variance_only(up)).unwrap()
                    - log_likelihood(&p, &Parameters::variance_only(dn)).unwrap())
                    / (2.0 * h);
                let denom = score[i].abs().max(1.0);
                assert!(
                    (score[i] - fd).abs() / denom <= 1e-5,
                    "component {i}: score {} vs fd {}",
                    score[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn gls_ols_intercept_and_weighted_mean() {
        // Omega = I, X = 1 -> mean(y)
        let y = DVector::from_vec(vec![1.0, 2.0, 6.0]);
        let x = DMatrix::from_element(3, 1, 1.0);
        let p = VarCompProblem::new(y, Some(x), vec![SymMatrix::identity(3)]).unwrap();
        let f = assemble_omega(&p, &DVector::from_vec(vec![1.0])).unwrap();
        let b = gls_beta(&p, &f).unwrap();
        assert_relative_eq!(b[0], 3.0, epsilon = 1e-12);

        // Omega = diag(w)^{-1}, w = (2, 1), y = (0, 3) -> beta = 1
        let y = DVector::from_vec(vec![0.0, 3.0]);
        let x = DMatrix::from_element(2, 1, 1.0);
        let v = SymMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0])))
            .unwrap();
        let p = VarCompProblem::new(y, Some(x), vec![v]).unwrap();
        let f = assemble_omega(&p, &DVector::from_vec(vec![1.0])).unwrap();
        let b = gls_beta(&p, &f).unwrap();
        assert_relative_eq!(b[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gls_matches_explicit_normal_equations() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let p = random_problem(8, 2, true, &mut rng);
        let s = DVector::from_vec(vec![0.9, 1.4]);
        let f = assemble_omega(&p, &s).unwrap();
        let beta = gls_beta(&p, &f).unwrap();

        let x = p.design().unwrap();
        let inv = f.omega.matrix().clone().try_inverse().unwrap();
        let normal = (x.transpose() * &inv * x).try_inverse().unwrap();
        let oracle = normal * x.transpose() * &inv * p.response();
        assert_relative_eq!(beta, oracle, epsilon = 1e-9);

        // normal-equations residual
        let r = p.residual(&beta);
        let lhs = (x.transpose() * &inv * &r).norm();
        let rhs = (x.transpose() * &inv * p.response()).norm();
        assert!(lhs <= 1e-8 * rhs);
    }

    #[test]
    fn kkt_boundary_sign_convention() {
        let sigma2 = DVector::from_vec(vec![0.0, 1.0]);
        // boundary component with negative score satisfies KKT
        let score = DVector::from_vec(vec![-0.5, 0.0]);
        assert_relative_eq!(kkt_from_score(&sigma2, &score), 0.0);
        // boundary component with positive score violates it
        let score = DVector::from_vec(vec![0.5, 0.0]);
        assert_relative_eq!(kkt_from_score(&sigma2, &score), 0.5);
    }

    #[test]
    fn problem_validation_errors() {
        let y = DVector::zeros(3);
        // indefinite basis rejected
        let bad = SymMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![
            1.0, -1.0, 1.0,
        ])))
        .unwrap();
        assert!(VarCompProblem::new(y.clone(), None, vec![bad]).is_err());
        // rank-deficient design rejected
        let x = DMatrix::from_fn(3, 2, |i, _| i as f64);
        assert!(matches!(
            VarCompProblem::new(y, Some(x), vec![SymMatrix::identity(3)]),
            Err(Error::RankDeficientDesign)
        ));
    }
}
