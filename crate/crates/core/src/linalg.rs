//! Dense symmetric-matrix kernels shared by all solvers: Cholesky,
//! symmetric square root, simultaneous congruence decomposition, Riccati
//! solve, Hadamard trace, and null-space basis extraction.
//!
//! All operations are pure functions of their inputs; nothing here holds
//! mutable global state.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative symmetry tolerance enforced by [`SymMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Eigenvalues in `[-PSD_CLAMP_TOL * scale, 0)` are clamped to zero.
pub const PSD_CLAMP_TOL: f64 = 1e-10;

/// Eigenvalues below `-PSD_ERROR_TOL * scale` make a matrix indefinite.
pub const PSD_ERROR_TOL: f64 = 1e-8;

/// A validated dense symmetric matrix.
///
/// Construction checks entrywise symmetry to within `1e-12` relative and
/// rejects non-finite entries. The wrapper dereferences to `DMatrix<f64>`
/// for read access.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        if !scale.is_finite() {
            return Err(Error::NonFinite("symmetric matrix entries".into()));
        }
        for j in 0..m.ncols() {
            for i in 0..j {
                let diff = (m[(i, j)] - m[(j, i)]).abs();
                if diff > SYMMETRY_TOL * scale.max(1.0) {
                    return Err(Error::DimensionMismatch(format!(
                        "matrix is not symmetric: |a[{i},{j}] - a[{j},{i}]| = {diff:.3e}"
                    )));
                }
            }
        }
        Ok(Self(m))
    }

    /// Wrap a matrix that is symmetric by construction.
    ///
    /// Debug builds still validate.
    pub fn from_symmetric_unchecked(m: DMatrix<f64>) -> Self {
        debug_assert!(Self::new(m.clone()).is_ok(), "matrix is not symmetric");
        Self(m)
    }

    /// Symmetrize `(m + m^T) / 2` and wrap. Used to scrub roundoff from
    /// products that are symmetric in exact arithmetic.
    pub fn symmetrize(m: &DMatrix<f64>) -> Self {
        let mut s = m.clone();
        for j in 0..s.ncols() {
            for i in 0..j {
                let avg = 0.5 * (s[(i, j)] + s[(j, i)]);
                s[(i, j)] = avg;
                s[(j, i)] = avg;
            }
        }
        Self(s)
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn order(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

impl std::ops::Deref for SymMatrix {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

impl AsRef<DMatrix<f64>> for SymMatrix {
    fn as_ref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Lower-triangular Cholesky factor of a positive definite matrix.
#[derive(Debug, Clone)]
pub struct CholFactor {
    l: DMatrix<f64>,
}

impl CholFactor {
    /// Factor a symmetric positive definite matrix as `L L^T`.
    ///
    /// Fails with [`Error::NotPositiveDefinite`] when a pivot drops to
    /// `n * eps * max|diag|` or below.
    pub fn factor(a: &DMatrix<f64>, context: &'static str) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "Cholesky input must be square, got {}x{}",
                n,
                a.ncols()
            )));
        }
        let max_diag = (0..n).fold(0.0f64, |acc, i| acc.max(a[(i, i)].abs()));
        let tol = (n as f64) * f64::EPSILON * max_diag;
        let mut l = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > tol) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    context,
                    pivot: d,
                    index: j,
                });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn order(&self) -> usize {
        self.l.nrows()
    }

    /// `2 * sum(ln L_ii)`, the log determinant of the factored matrix.
    pub fn log_det(&self) -> f64 {
        (0..self.l.nrows()).map(|i| self.l[(i, i)].ln()).sum::<f64>() * 2.0
    }

    /// Solve `A x = b` by forward and back substitution.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        self.l.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    /// Solve `A X = B` columnwise.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        self.l.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    /// Forward solve only: `L x = b`.
    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        x
    }

    /// Back solve only: `L^T x = b`.
    pub fn solve_lower_transpose_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.l.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    /// Explicit symmetric inverse `A^{-1} = L^{-T} L^{-1}`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.l.nrows();
        let inv = self.solve_mat(&DMatrix::identity(n, n));
        // wipe the tiny asymmetry left by the two triangular sweeps
        SymMatrix::symmetrize(&inv).into_inner()
    }
}

/// Cholesky factor `L` (lower triangular, positive diagonal) with `L L^T = A`.
pub fn cholesky(a: &SymMatrix) -> Result<DMatrix<f64>> {
    Ok(CholFactor::factor(a.matrix(), "cholesky")?.l)
}

/// Eigendecomposition of a symmetric matrix with eigenvalues in ascending
/// order and eigenvectors in matching columns.
pub fn sym_eigen_sorted(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let eig = nalgebra::SymmetricEigen::new(a.clone());
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
    let values = DVector::from_iterator(n, idx.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in idx.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Symmetric PSD square root: `S` with `S S = A`.
///
/// Eigenvalues in `[-1e-10 * scale, 0)` are clamped to zero; anything below
/// `-1e-8 * scale` is an error.
pub fn sym_sqrt(a: &SymMatrix) -> Result<SymMatrix> {
    let (values, vectors) = sym_eigen_sorted(a.matrix());
    let scale = values.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let tol = PSD_ERROR_TOL * scale;
    let mut roots = values;
    for v in roots.iter_mut() {
        if *v < -tol {
            return Err(Error::IndefiniteInput {
                min_eigenvalue: *v,
                tolerance: tol,
            });
        }
        *v = v.max(0.0).sqrt();
    }
    let scaled = &vectors * DMatrix::from_diagonal(&roots);
    Ok(SymMatrix::symmetrize(&(scaled * vectors.transpose())))
}

/// Simultaneous congruence decomposition of a symmetric/SPD pair.
///
/// `U` is nonsingular with `U^T V1 U = diag(d)` and `U^T V2 U = I`. The
/// generalized eigenvalues `d` are returned in ascending order; `U` columns
/// are unique only up to sign when the `d` are distinct.
#[derive(Debug, Clone)]
pub struct CongruencePair {
    pub d: DVector<f64>,
    pub u: DMatrix<f64>,
}

/// Compute the simultaneous congruence decomposition of `(V1, V2)` with
/// `V2` positive definite.
///
/// `V2` is Cholesky-reduced (`V2 = K K^T`), the standard symmetric
/// eigenproblem is solved on `K^{-1} V1 K^{-T}`, and `U = K^{-T} Q`.
pub fn congruence_decomp(v1: &SymMatrix, v2: &SymMatrix) -> Result<CongruencePair> {
    let n = v1.order();
    if n != v2.order() {
        return Err(Error::DimensionMismatch(format!(
            "congruence pair orders differ: {} vs {}",
            n,
            v2.order()
        )));
    }
    let k = CholFactor::factor(v2.matrix(), "congruence_decomp second operand")?;
    // W = K^{-1} V1 K^{-T}
    let half = k.solve_lower_mat(v1.matrix());
    let w = k.solve_lower_mat(&half.transpose());
    let w = SymMatrix::symmetrize(&w);
    let (d, q) = sym_eigen_sorted(w.matrix());
    let u = k.solve_lower_transpose_mat(&q);
    Ok(CongruencePair { d, u })
}

/// Unique SPD solution `X` of the Riccati equation `X^{-1} A X^{-1} = B`,
/// equivalently `X B X = A`.
///
/// Computed as `X = L^{-T} (L^T A L)^{1/2} L^{-1}` with `L` the Cholesky
/// factor of `B`. The symmetric square root of `B` would give the same
/// solution; the Cholesky factor is cheaper.
pub fn riccati_solve(a: &SymMatrix, b: &SymMatrix) -> Result<SymMatrix> {
    if a.order() != b.order() {
        return Err(Error::DimensionMismatch(format!(
            "Riccati operands differ in order: {} vs {}",
            a.order(),
            b.order()
        )));
    }
    let l = CholFactor::factor(b.matrix(), "riccati_solve B operand")?;
    // positive-definiteness of A is checked here as well
    CholFactor::factor(a.matrix(), "riccati_solve A operand")?;
    riccati_from_chol(a, &l)
}

/// Riccati solve when the Cholesky factor of `B` is already available.
/// `A` may be PSD here; the square root clamps tiny negative eigenvalues.
pub fn riccati_from_chol(a: &SymMatrix, l: &CholFactor) -> Result<SymMatrix> {
    let lt_a_l = l.lower().transpose() * a.matrix() * l.lower();
    let root = sym_sqrt(&SymMatrix::symmetrize(&lt_a_l))?;
    // X = L^{-T} root L^{-1}: solve L^T Y = root, then X^T = L^{-T} Y^T
    let y = l.solve_lower_transpose_mat(root.matrix());
    let x = l.solve_lower_transpose_mat(&y.transpose());
    Ok(SymMatrix::symmetrize(&x))
}

/// `tr(A B) = 1^T (A \odot B) 1` for symmetric operands.
pub fn hadamard_trace(a: &SymMatrix, b: &SymMatrix) -> Result<f64> {
    hadamard_trace_raw(a.matrix(), b.matrix())
}

pub(crate) fn hadamard_trace_raw(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() || a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "Hadamard trace operands differ: {}x{} vs {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| x * y).sum())
}

/// Orthonormal basis of the null space of `X^T`.
///
/// Returns an `n x (n - r)` matrix `B` with `B^T B = I` and `X^T B = 0`,
/// where `r = rank(X)`. Errors with [`Error::FullRowRank`] when `r = n`.
pub fn nullspace_basis(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if x.ncols() == 0 {
        return Ok(DMatrix::identity(n, n));
    }
    // null(X^T) = null(X X^T); eigenvectors of the Gram matrix with
    // near-zero eigenvalues give an orthonormal basis directly.
    let gram = x * x.transpose();
    let (values, vectors) = sym_eigen_sorted(&gram);
    let scale = values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tol = PSD_CLAMP_TOL * scale;
    let null_dim = values.iter().filter(|&&v| v <= tol).count();
    if null_dim == 0 {
        return Err(Error::FullRowRank);
    }
    Ok(vectors.columns(0, null_dim).into_owned())
}

/// Rank of a symmetric PSD matrix by eigenvalue thresholding at
/// `1e-10 * lambda_max`.
pub fn psd_rank(a: &DMatrix<f64>) -> usize {
    let (values, _) = sym_eigen_sorted(a);
    let scale = values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return 0;
    }
    let tol = PSD_CLAMP_TOL * scale;
    values.iter().filter(|&&v| v > tol).count()
}

/// Verify that a symmetric matrix is PSD under the module tolerances and
/// return its eigenvalue-thresholded rank.
pub fn check_psd(a: &SymMatrix) -> Result<usize> {
    let (values, _) = sym_eigen_sorted(a.matrix());
    let scale = values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tol = PSD_ERROR_TOL * scale;
    if let Some(&min) = values.as_slice().first() {
        if min < -tol {
            return Err(Error::IndefiniteInput {
                min_eigenvalue: min,
                tolerance: tol,
            });
        }
    }
    let rank_tol = PSD_CLAMP_TOL * scale;
    Ok(values.iter().filter(|&&v| v > rank_tol).count())
}
