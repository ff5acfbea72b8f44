//! Dense linear-algebra kernel: incremental least-squares accumulation,
//! normal-equation solves for vector and matrix targets, minimum-eigenvalue
//! computation, and an IRLS logistic fitter for propensity models.
//!
//! All problems here are small (dimension ≤ ~20), so solves recompute from
//! the accumulated moments on each call instead of maintaining a running
//! inverse.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Relative eigenvalue threshold below which a design matrix is treated as
/// singular: `lambda_min < SINGULARITY_TOL * max(1, lambda_max)`.
pub const SINGULARITY_TOL: f64 = 1e-10;

/// Coefficient-norm clamp applied when a logistic fit diverges under
/// perfect separation.
pub const LOGISTIC_COEF_CLAMP: f64 = 30.0;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("design matrix is singular or near-singular (min eigenvalue {min_eig:.3e})")]
    EstimatorUnavailable { min_eig: f64 },

    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),

    #[error("logistic fit needs at least as many rows as columns ({rows} rows, {cols} cols)")]
    TooFewRows { rows: usize, cols: usize },

    #[error("labels must lie in {{0, 1}}, found {0}")]
    InvalidLabel(f64),
}

/// Accumulated sufficient statistics for one least-squares regression
/// target: `sigma = Σ x xᵀ` (d×d), `cross = Σ x yᵀ` (d×k), and the sample
/// count.
///
/// The state is a plain value; each simulation path owns its own copy.
#[derive(Debug, Clone)]
pub struct OlsState {
    sigma: DMatrix<f64>,
    cross: DMatrix<f64>,
    n: usize,
}

impl OlsState {
    /// Empty state for covariates of dimension `d` and outcomes of
    /// dimension `k` (`k = 1` for scalar regression).
    pub fn new(d: usize, k: usize) -> Self {
        assert!(d >= 1 && k >= 1, "OlsState dimensions must be positive");
        Self {
            sigma: DMatrix::zeros(d, d),
            cross: DMatrix::zeros(d, k),
            n: 0,
        }
    }

    pub fn covariate_dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn outcome_dim(&self) -> usize {
        self.cross.ncols()
    }

    /// Number of accumulated samples.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn cross(&self) -> &DMatrix<f64> {
        &self.cross
    }

    /// Accumulate one observation: `sigma += x xᵀ`, `cross += x yᵀ`.
    pub fn update(&mut self, x: &[f64], y: &[f64]) -> Result<(), LinalgError> {
        let d = self.covariate_dim();
        let k = self.outcome_dim();
        if x.len() != d {
            return Err(LinalgError::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        if y.len() != k {
            return Err(LinalgError::DimensionMismatch {
                expected: k,
                got: y.len(),
            });
        }
        for i in 0..d {
            for j in 0..d {
                self.sigma[(i, j)] += x[i] * x[j];
            }
            for (j, yj) in y.iter().enumerate() {
                self.cross[(i, j)] += x[i] * yj;
            }
        }
        self.n += 1;
        Ok(())
    }

    /// Solve the normal equations, returning the d×k coefficient matrix
    /// `sigma⁻¹ · cross`.
    ///
    /// Fails with [`LinalgError::EstimatorUnavailable`] when the minimum
    /// eigenvalue of `sigma` falls below the singularity tolerance.
    pub fn solve(&self) -> Result<DMatrix<f64>, LinalgError> {
        let eig = nalgebra::SymmetricEigen::new(self.sigma.clone());
        let min_eig = eig.eigenvalues.min();
        let max_eig = eig.eigenvalues.max();
        if min_eig < SINGULARITY_TOL * max_eig.max(1.0) {
            return Err(LinalgError::EstimatorUnavailable { min_eig });
        }
        // sigma⁻¹ = V Λ⁻¹ Vᵀ from the same decomposition used for the check.
        let vt_cross = eig.eigenvectors.transpose() * &self.cross;
        let mut scaled = vt_cross;
        for (i, lambda) in eig.eigenvalues.iter().enumerate() {
            for j in 0..scaled.ncols() {
                scaled[(i, j)] /= lambda;
            }
        }
        Ok(&eig.eigenvectors * scaled)
    }

    /// Convenience for scalar-outcome regressions (`k = 1`).
    pub fn solve_vector(&self) -> Result<DVector<f64>, LinalgError> {
        Ok(self.solve()?.column(0).into_owned())
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64, LinalgError> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::DimensionMismatch {
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    let mut asym = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if asym > 1e-9 * scale {
        return Err(LinalgError::NotSymmetric(asym));
    }
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    Ok(eig.eigenvalues.min())
}

/// Result of a logistic fit.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub coef: DVector<f64>,
    /// Newton steps settled below the tolerance before `max_iter`.
    pub converged: bool,
    /// Coefficient norm diverged (perfect or quasi-perfect separation);
    /// the returned coefficients are clamped to [`LOGISTIC_COEF_CLAMP`].
    pub separation: bool,
}

impl LogisticFit {
    /// Fitted probability of label 1 for a feature vector.
    pub fn prob(&self, features: &[f64]) -> f64 {
        let eta: f64 = features
            .iter()
            .zip(self.coef.iter())
            .map(|(x, w)| x * w)
            .sum();
        sigmoid(eta)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Maximum-likelihood logistic regression via iteratively reweighted least
/// squares.
///
/// `labels` must be 0/1. Separation is detected by the coefficient norm
/// exceeding [`LOGISTIC_COEF_CLAMP`]; the fit is then clamped and flagged
/// rather than rejected.
pub fn logistic_fit(
    features: &DMatrix<f64>,
    labels: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<LogisticFit, LinalgError> {
    let (n, p) = (features.nrows(), features.ncols());
    if labels.len() != n {
        return Err(LinalgError::DimensionMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    if n < p {
        return Err(LinalgError::TooFewRows { rows: n, cols: p });
    }
    for &y in labels {
        if y != 0.0 && y != 1.0 {
            return Err(LinalgError::InvalidLabel(y));
        }
    }

    let y = DVector::from_column_slice(labels);
    let mut coef = DVector::zeros(p);
    let mut converged = false;
    let mut separation = false;

    for _ in 0..max_iter {
        let eta = features * &coef;
        let mu = eta.map(sigmoid);
        // Weighted normal equations: (Xᵀ W X) δ = Xᵀ (y − μ), W = diag(μ(1−μ)).
        let mut xtwx = DMatrix::zeros(p, p);
        let mut xtr = DVector::zeros(p);
        for i in 0..n {
            // Guard against exact-zero weights only; a larger floor would
            // stall the divergence that the separation clamp watches for.
            let w = (mu[i] * (1.0 - mu[i])).max(1e-300);
            let r = y[i] - mu[i];
            for a in 0..p {
                let xa = features[(i, a)];
                xtr[a] += xa * r;
                for b in 0..p {
                    xtwx[(a, b)] += w * xa * features[(i, b)];
                }
            }
        }
        let step = match irls_step(&xtwx, &xtr) {
            Some(s) => s,
            None => break,
        };
        coef += &step;
        if coef.norm() > LOGISTIC_COEF_CLAMP {
            let scale = LOGISTIC_COEF_CLAMP / coef.norm();
            coef *= scale;
            separation = true;
            break;
        }
        if step.norm() < tol {
            converged = true;
            break;
        }
    }

    Ok(LogisticFit {
        coef,
        converged,
        separation,
    })
}

/// Newton step for the weighted normal equations. The weight matrix
/// shrinks toward zero under separation, so singularity is judged relative
/// to the largest eigenvalue only (no absolute floor), with degenerate
/// directions dropped pseudo-inverse style.
fn irls_step(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let max_eig = eig.eigenvalues.max();
    if !max_eig.is_finite() || max_eig <= 0.0 {
        return None;
    }
    let floor = 1e-12 * max_eig;
    let mut z = eig.eigenvectors.transpose() * rhs;
    for (i, lambda) in eig.eigenvalues.iter().enumerate() {
        if *lambda > floor {
            z[i] /= lambda;
        } else {
            z[i] = 0.0;
        }
    }
    Some(&eig.eigenvectors * z)
}

/// Dot product over slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `Bᵀ x` for a row-major `d×d` matrix stored flat.
pub fn mat_t_vec(b_rowmajor: &[f64], d: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(b_rowmajor.len(), d * d);
    debug_assert_eq!(x.len(), d);
    let mut out = vec![0.0; d];
    for i in 0..d {
        let row = &b_rowmajor[i * d..(i + 1) * d];
        for (j, o) in out.iter_mut().enumerate() {
            *o += row[j] * x[i];
        }
    }
    out
}
