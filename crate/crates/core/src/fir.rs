//! Linear FIR estimation: regressor construction, least squares and
//! kernel-regularized least squares with DC/TC priors.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Impulse-response coefficients `g_0 ..= g_{n_b}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FirModel {
    g: Vec<f64>,
}

impl FirModel {
    pub fn new(g: Vec<f64>) -> Result<Self> {
        if g.is_empty() {
            return Err(Error::Config("FIR model needs at least one coefficient".into()));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite FIR coefficient".into()));
        }
        Ok(Self { g })
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.g
    }

    pub fn n_b(&self) -> usize {
        self.g.len() - 1
    }

    /// `y_hat(t) = sum_k g_k u(t-k)` with zero initial conditions.
    pub fn predict(&self, u: &[f64]) -> Vec<f64> {
        (0..u.len())
            .map(|t| {
                self.g
                    .iter()
                    .take(t + 1)
                    .enumerate()
                    .map(|(k, g)| g * u[t - k])
                    .sum()
            })
            .collect()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        let g: Vec<f64> = serde_json::from_str(&text)?;
        Self::new(g)
    }
}

/// Free function form of [`FirModel::predict`].
pub fn predict(model: &FirModel, u: &[f64]) -> Vec<f64> {
    model.predict(u)
}

/// `N x (n_b+1)` matrix whose row `t` is `[u(t), u(t-1), ..., u(t-n_b)]`;
/// samples before the record are zero.
pub fn build_regressor(u: &[f64], n_b: usize) -> Result<DMatrix<f64>> {
    if u.is_empty() {
        return Err(Error::InsufficientData("empty input sequence".into()));
    }
    Ok(DMatrix::from_fn(u.len(), n_b + 1, |t, k| {
        if t >= k {
            u[t - k]
        } else {
            0.0
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// Diagonal/correlated.
    Dc,
    /// Tuned/correlated.
    Tc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub c: f64,
    pub lambda: f64,
    /// Only used by the DC kernel.
    pub rho: f64,
    pub sigma2: f64,
}

impl KernelConfig {
    pub fn tc(c: f64, lambda: f64, sigma2: f64) -> Self {
        Self {
            kind: KernelKind::Tc,
            c,
            lambda,
            rho: 1.0,
            sigma2,
        }
    }

    pub fn dc(c: f64, lambda: f64, rho: f64, sigma2: f64) -> Self {
        Self {
            kind: KernelKind::Dc,
            c,
            lambda,
            rho,
            sigma2,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(Error::Config(format!("kernel scale c must be > 0, got {}", self.c)));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::Config(format!("kernel decay must lie in (0, 1), got {}", self.lambda)));
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("kernel correlation must lie in [-1, 1], got {}", self.rho)));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::Config(format!("noise variance must be > 0, got {}", self.sigma2)));
        }
        Ok(())
    }
}

/// Prior covariance `P` of size `n x n`:
/// TC: `c * lambda^max(i,j)`; DC: `c * lambda^((i+j)/2) * rho^|i-j|`.
pub fn kernel_covariance(cfg: &KernelConfig, n: usize) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    Ok(DMatrix::from_fn(n, n, |i, j| match cfg.kind {
        KernelKind::Tc => cfg.c * cfg.lambda.powi(i.max(j) as i32),
        KernelKind::Dc => {
            cfg.c * cfg.lambda.powf((i + j) as f64 / 2.0) * cfg.rho.powi(i.abs_diff(j) as i32)
        }
    }))
}

/// Regularization matrix `R = sigma^2 P^-1`.
pub fn build_kernel(cfg: &KernelConfig, n: usize) -> Result<DMatrix<f64>> {
    let p = kernel_covariance(cfg, n)?;
    let chol = p
        .cholesky()
        .ok_or_else(|| Error::Singular("kernel covariance is not positive definite".into()))?;
    Ok(chol.inverse() * cfg.sigma2)
}

/// Solves the symmetric system `a x = b`: Cholesky first, QR when the
/// factorization breaks down on a matrix that is still positive definite.
fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    let eig = a.clone().symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    if !(min > max * 1e-14) {
        return Err(Error::Singular(format!(
            "system is not positive definite (eigenvalues in [{min:e}, {max:e}])"
        )));
    }
    a.qr()
        .solve(b)
        .ok_or_else(|| Error::Singular("QR solve failed".into()))
}

fn check_record(u: &[f64], y: &[f64], n_b: usize) -> Result<()> {
    if u.len() != y.len() {
        return Err(Error::Dimension {
            expected: u.len(),
            got: y.len(),
        });
    }
    if u.len() <= n_b + 1 {
        return Err(Error::InsufficientData(format!(
            "{} samples cannot determine {} coefficients",
            u.len(),
            n_b + 1
        )));
    }
    Ok(())
}

/// `(X^T X + R)^-1 X^T y`.
pub fn fit_regularized(u: &[f64], y: &[f64], n_b: usize, r: &DMatrix<f64>) -> Result<FirModel> {
    check_record(u, y, n_b)?;
    if r.shape() != (n_b + 1, n_b + 1) {
        return Err(Error::Dimension {
            expected: n_b + 1,
            got: r.nrows(),
        });
    }
    let x = build_regressor(u, n_b)?;
    let yv = DVector::from_column_slice(y);
    let xtx = x.tr_mul(&x);
    let xty = x.tr_mul(&yv);
    let theta = solve_spd(xtx + r, &xty)?;
    FirModel::new(theta.iter().copied().collect())
}

/// Ordinary least squares, `(X^T X)^-1 X^T y`.
pub fn fit_ls(u: &[f64], y: &[f64], n_b: usize) -> Result<FirModel> {
    fit_regularized(u, y, n_b, &DMatrix::zeros(n_b + 1, n_b + 1))
}
