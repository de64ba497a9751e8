//! Closed-form quantities of the linear regression problem.
//!
//! Everything here assumes the generative model `y = xᵀw* + η` with
//! `x ~ N(0, C)`, `C = E xxᵀ`, and `η ~ N(0, σ²)` independent of `x`.
//! Under that model the expected squared prediction error expands as
//!
//! ```text
//! J(w) = ½ E (y − xᵀw)²
//!      = ½ E (xᵀ(w* − w) + η)²
//!      = ½ (w − w*)ᵀ C (w − w*) + E[η] E[xᵀ(w* − w)] + ½ E η²
//!      = ½ (w − w*)ᵀ C (w − w*) + ½ σ²
//! ```
//!
//! since the cross term vanishes by independence and `E η = 0`. The
//! normal equations `C w* − E xy = 0` hold because `E xy = C w*`, so
//! `∇J(w) = C w − E xy = C (w − w*)`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Relative asymmetry tolerated in a supplied covariance before it is
/// rejected.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Smallest admissible covariance eigenvalue.
pub const MIN_EIGENVALUE: f64 = 1e-12;
/// Eigenvalue floor used by [`contraction_check`].
pub const CONTRACTION_TOL: f64 = 1e-10;

/// Ground-truth regression problem: the oracle's knowledge of the data
/// distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    true_weights: Vec<f64>,
    feature_cov: DMatrix<f64>,
    noise_std: f64,
    eigenvalues: Vec<f64>,
}

impl ProblemSpec {
    pub fn new(true_weights: Vec<f64>, feature_cov: DMatrix<f64>, noise_std: f64) -> Result<Self> {
        let dim = true_weights.len();
        if dim == 0 {
            return Err(Error::InvalidProblem("dimension must be positive".into()));
        }
        if !feature_cov.is_square() {
            return Err(Error::InvalidProblem(format!(
                "feature covariance is {}x{}, expected square",
                feature_cov.nrows(),
                feature_cov.ncols()
            )));
        }
        check_dim(dim, feature_cov.nrows())?;
        if true_weights.iter().any(|v| !v.is_finite()) || feature_cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("non-finite entry".into()));
        }
        if !(noise_std.is_finite() && noise_std >= 0.0) {
            return Err(Error::InvalidProblem(format!(
                "noise_std must be a nonnegative real, got {noise_std}"
            )));
        }

        let scale = feature_cov.amax().max(f64::MIN_POSITIVE);
        let asym = (&feature_cov - feature_cov.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::InvalidProblem(format!(
                "feature covariance is not symmetric (max |A - A^T| = {asym:e})"
            )));
        }
        let feature_cov = (&feature_cov + feature_cov.transpose()) * 0.5;
        let mut eigenvalues: Vec<f64> = SymmetricEigen::new(feature_cov.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        eigenvalues.sort_by(f64::total_cmp);
        if eigenvalues[0] < MIN_EIGENVALUE {
            return Err(Error::InvalidProblem(format!(
                "feature covariance is not positive definite (min eigenvalue {:e})",
                eigenvalues[0]
            )));
        }

        Ok(Self {
            true_weights,
            feature_cov,
            noise_std,
            eigenvalues,
        })
    }

    /// Problem with a diagonal feature covariance.
    pub fn diagonal(true_weights: Vec<f64>, variances: &[f64], noise_std: f64) -> Result<Self> {
        check_dim(true_weights.len(), variances.len())?;
        let cov = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(variances));
        Self::new(true_weights, cov, noise_std)
    }

    pub fn dim(&self) -> usize {
        self.true_weights.len()
    }

    pub fn true_weights(&self) -> &[f64] {
        &self.true_weights
    }

    pub fn feature_cov(&self) -> &DMatrix<f64> {
        &self.feature_cov
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    /// Eigenvalues of the feature covariance in ascending order.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn lambda_max(&self) -> f64 {
        *self.eigenvalues.last().expect("dim > 0")
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// `J(w*) = ½σ²`, the irreducible noise floor.
    pub fn optimal_objective(&self) -> f64 {
        0.5 * self.noise_std * self.noise_std
    }

    pub fn optimal_weights(&self) -> WeightVector {
        WeightVector(self.true_weights.clone())
    }

    /// `aᵀ C b`.
    pub(crate) fn cov_form(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .enumerate()
            .map(|(i, ai)| {
                let row: f64 = b.iter().enumerate().map(|(j, bj)| self.feature_cov[(i, j)] * bj).sum();
                ai * row
            })
            .sum()
    }

    pub(crate) fn cov_apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n)
            .map(|i| (0..n).map(|j| self.feature_cov[(i, j)] * v[j]).sum())
            .collect()
    }
}

/// Model weights `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `self − scale·direction`.
    pub fn stepped(&self, scale: f64, direction: &[f64]) -> Self {
        Self(self.0.iter().zip(direction).map(|(w, g)| w - scale * g).collect())
    }
}

impl From<Vec<f64>> for WeightVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl std::ops::Deref for WeightVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// `N` feature/label pairs, features stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataBatch {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
}

impl DataBatch {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidProblem("dimension must be positive".into()));
        }
        if labels.is_empty() {
            return Err(Error::InvalidProblem("batch must contain at least one sample".into()));
        }
        check_dim(labels.len() * dim, features.len())?;
        Ok(Self { dim, features, labels })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<f64>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        check_dim(labels.len(), rows.len())?;
        for r in rows {
            check_dim(dim, r.len())?;
        }
        Self::new(dim, rows.concat(), labels)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.dim)
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }
}

/// Spectral constants of the gradient iteration for a given step size.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralConstants {
    pub eps: f64,
    /// `max_i (1 − ε λ_i)²`.
    pub rho: f64,
    /// `Σx = C / 2`.
    pub sigma_x: DMatrix<f64>,
    /// `2 / λ_max`.
    pub eps_max: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl SpectralConstants {
    /// Whether `0 < ε < 2/λ_max`, i.e. `ρ < 1`.
    pub fn is_contractive(&self) -> bool {
        self.eps < self.eps_max
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

fn offset_from_optimum(spec: &ProblemSpec, w: &[f64]) -> Result<Vec<f64>> {
    check_dim(spec.dim(), w.len())?;
    Ok(w.iter().zip(spec.true_weights()).map(|(a, b)| a - b).collect())
}

/// Expected squared prediction error `J(w) = ½(w−w*)ᵀC(w−w*) + ½σ²`.
pub fn objective(spec: &ProblemSpec, w: &[f64]) -> Result<f64> {
    let d = offset_from_optimum(spec, w)?;
    Ok(0.5 * spec.cov_form(&d, &d) + spec.optimal_objective())
}

/// `∇J(w) = C (w − w*)`.
pub fn true_gradient(spec: &ProblemSpec, w: &[f64]) -> Result<Vec<f64>> {
    let d = offset_from_optimum(spec, w)?;
    Ok(spec.cov_apply(&d))
}

/// Empirical-risk gradient `(1/N) Xᵀ(Xw − y)`, accumulated one residual at
/// a time.
pub fn stochastic_gradient(batch: &DataBatch, w: &[f64]) -> Result<Vec<f64>> {
    check_dim(batch.dim(), w.len())?;
    let mut g = vec![0.0; batch.dim()];
    for (x, y) in batch.rows().zip(batch.labels()) {
        let residual = dot(x, w) - y;
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi += residual * xi;
        }
    }
    let inv_n = 1.0 / batch.len() as f64;
    g.iter_mut().for_each(|v| *v *= inv_n);
    Ok(g)
}

pub fn spectral_constants(spec: &ProblemSpec, eps: f64) -> Result<SpectralConstants> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidParameter {
            name: "eps",
            reason: format!("step size must be positive, got {eps}"),
        });
    }
    let rho = spec
        .eigenvalues()
        .iter()
        .map(|l| (1.0 - eps * l).powi(2))
        .fold(0.0, f64::max);
    let constants = SpectralConstants {
        eps,
        rho,
        sigma_x: spec.feature_cov() * 0.5,
        eps_max: 2.0 / spec.lambda_max(),
        lambda_min: spec.lambda_min(),
        lambda_max: spec.lambda_max(),
    };
    if !constants.is_contractive() {
        log::warn!(
            "step size {eps} >= 2/lambda_max = {}: iteration is not contractive (rho = {rho})",
            constants.eps_max
        );
    }
    Ok(constants)
}

/// Checks `(I − 2εΣx)ᵀ Σx (I − 2εΣx) ⪯ ρ Σx` via the smallest eigenvalue of
/// the difference.
pub fn contraction_check(spec: &ProblemSpec, eps: f64) -> bool {
    let Ok(sc) = spectral_constants(spec, eps) else {
        return false;
    };
    let n = spec.dim();
    let m = DMatrix::<f64>::identity(n, n) - &sc.sigma_x * (2.0 * eps);
    let lhs = m.transpose() * &sc.sigma_x * &m;
    let diff = &sc.sigma_x * sc.rho - lhs;
    let diff = (&diff + diff.transpose()) * 0.5;
    SymmetricEigen::new(diff)
        .eigenvalues
        .iter()
        .all(|&l| l >= -CONTRACTION_TOL)
}
