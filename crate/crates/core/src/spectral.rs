//! Spectral truncation of the state space.
//!
//! The generator is diagonal, `A = diag(mu)`, so the semigroup, the drift
//! convolution `∫₀ʰ S(r)v dr` and the covariance of the filtered noise
//! `∫ S(t+h-s) g dW_s` all have closed forms.

use nalgebra::{Cholesky, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tolerances;
use crate::{Matrix, Vector};

/// `(e^z - 1)/z`, continuous through `z = 0`.
pub fn phi1(z: f64) -> f64 {
    if z.abs() < tolerances::SERIES_SWITCH {
        1.0 + z / 2.0 + z * z / 6.0
    } else {
        z.exp_m1() / z
    }
}

/// Truncated state space `R^n` with generator eigenvalues `mu`, `m` noise
/// directions and `d` control coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSpace {
    mu: Vec<f64>,
    noise_dim: usize,
    control_dim: usize,
}

impl SpectralSpace {
    pub fn new(mu: Vec<f64>, noise_dim: usize, control_dim: usize) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::invalid("state dimension n must be at least 1"));
        }
        if noise_dim == 0 {
            return Err(Error::invalid("noise dimension m must be at least 1"));
        }
        if control_dim == 0 {
            return Err(Error::invalid("control dimension d must be at least 1"));
        }
        if let Some(k) = mu.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("eigenvalue mu[{k}] is not finite")));
        }
        Ok(SpectralSpace {
            mu,
            noise_dim,
            control_dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.mu
    }

    /// Largest eigenvalue; positive values mean an unstable generator.
    pub fn max_eigenvalue(&self) -> f64 {
        self.mu.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `A x`.
    pub fn generator_apply(&self, x: &Vector) -> Vector {
        Vector::from_iterator(self.dim(), self.mu.iter().zip(x.iter()).map(|(m, v)| m * v))
    }

    fn check_state(&self, x: &Vector) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "state has length {}, expected {}",
                x.len(),
                self.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("state has non-finite entries"));
        }
        Ok(())
    }

    /// `S(t) x = diag(exp(mu_k t)) x`.
    pub fn semigroup_apply(&self, t: f64, x: &Vector) -> Result<Vector> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::invalid(format!("semigroup time must be >= 0, got {t}")));
        }
        self.check_state(x)?;
        Ok(Vector::from_iterator(
            self.dim(),
            self.mu.iter().zip(x.iter()).map(|(m, v)| (m * t).exp() * v),
        ))
    }

    /// `∫₀ʰ S(r) v dr`; component `k` is `v_k (e^{mu_k h} - 1)/mu_k`.
    pub fn drift_convolution(&self, h: f64, v: &Vector) -> Result<Vector> {
        check_step(h)?;
        self.check_state(v)?;
        Ok(Vector::from_iterator(
            self.dim(),
            self.mu
                .iter()
                .zip(v.iter())
                .map(|(m, vk)| h * phi1(m * h) * vk),
        ))
    }

    /// Covariance of `∫ₜ^{t+h} S(t+h-s) g dW_s` for a frozen `g`:
    /// `C_jk = (g gᵀ)_jk (e^{(mu_j+mu_k)h} - 1)/(mu_j + mu_k)`.
    pub fn noise_covariance(&self, h: f64, g: &HSOperator) -> Result<Matrix> {
        check_step(h)?;
        let n = self.dim();
        if g.rows() != n {
            return Err(Error::invalid(format!(
                "noise operator has {} rows, expected {n}",
                g.rows()
            )));
        }
        let ggt = g.matrix() * g.matrix().transpose();
        let mut c = Matrix::zeros(n, n);
        for j in 0..n {
            for k in j..n {
                let v = ggt[(j, k)] * h * phi1((self.mu[j] + self.mu[k]) * h);
                c[(j, k)] = v;
                c[(k, j)] = v;
            }
        }
        Ok(c)
    }
}

fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid(format!("step length must be > 0, got {h}")));
    }
    Ok(())
}

/// A Hilbert–Schmidt operator `Ξ → H`, stored as its `n × m` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HSOperator(Matrix);

impl HSOperator {
    pub fn new(entries: Matrix) -> Self {
        HSOperator(entries)
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        HSOperator(Matrix::zeros(n, m))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Image of the `j`-th noise direction.
    pub fn column(&self, j: usize) -> Vector {
        self.0.column(j).into_owned()
    }

    /// `G*(x) y`, the adjoint applied to a state vector.
    pub fn adjoint_apply(&self, y: &Vector) -> Vector {
        self.0.transpose() * y
    }

    pub fn hs_norm(&self) -> f64 {
        hs_norm(self)
    }
}

/// Hilbert–Schmidt (Frobenius) norm.
pub fn hs_norm(g: &HSOperator) -> f64 {
    g.0.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Lower-triangular Cholesky factor of `c + jitter·I`, `jitter = 1e-12·tr(c)`.
pub fn cholesky_factor(c: &Matrix) -> Result<Matrix> {
    let trace = c.trace();
    let jitter = tolerances::COVARIANCE_JITTER * trace.abs();
    let mut shifted = c.clone();
    for k in 0..shifted.nrows() {
        shifted[(k, k)] += jitter;
    }
    Cholesky::new(shifted)
        .map(|ch| ch.l())
        .ok_or(Error::DegenerateCovariance { jitter })
}

/// Factor `L` with `L Lᵀ ≈ c` from the symmetric eigendecomposition,
/// negative eigenvalues clamped to zero.
pub fn eigen_factor(c: &Matrix) -> Matrix {
    let eig = SymmetricEigen::new(c.clone());
    let mut v = eig.eigenvectors;
    for (k, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        v.column_mut(k).scale_mut(s);
    }
    v
}

/// Sampling factor for a covariance: Cholesky with jitter, falling back to
/// the clamped eigendecomposition. A zero matrix gives a zero factor.
pub fn sampling_factor(c: &Matrix) -> Matrix {
    if c.iter().all(|v| *v == 0.0) {
        return Matrix::zeros(c.nrows(), c.ncols());
    }
    cholesky_factor(c).unwrap_or_else(|_| eigen_factor(c))
}
