//! Dense Cholesky for the small symmetric positive-definite systems.
//!
//! The conjugate coefficient updates act on q×q normal equations with q of
//! order one, and the posterior summaries manipulate p×p covariances with
//! p = 2, so a compact row-major factorization covers every dense need of
//! the crate. Matrices are `Vec<f64>` in row-major order; only the lower
//! triangle of the input is read.

use rand::{Rng, RngExt};
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DenseError {
    #[error("matrix slice length {got} does not match dimension {dim}×{dim}")]
    ShapeMismatch { got: usize, dim: usize },
    #[error("vector length {got} does not match dimension {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
}

/// Lower-triangular Cholesky factor `A = L·L′` of a dense SPD matrix,
/// stored row-major with the strict upper triangle zeroed.
#[derive(Debug, Clone)]
pub struct DenseChol {
    dim: usize,
    l: Vec<f64>,
}

impl DenseChol {
    /// Factorizes a row-major symmetric matrix, reading its lower triangle.
    pub fn new(a: &[f64], dim: usize) -> Result<Self, DenseError> {
        if a.len() != dim * dim {
            return Err(DenseError::ShapeMismatch { got: a.len(), dim });
        }
        let mut l = vec![0.0; dim * dim];
        for r in 0..dim {
            for c in 0..=r {
                let mut sum = a[r * dim + c];
                for k in 0..c {
                    sum -= l[r * dim + k] * l[c * dim + k];
                }
                if r == c {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(DenseError::NotPositiveDefinite { pivot: r });
                    }
                    l[r * dim + c] = sum.sqrt();
                } else {
                    l[r * dim + c] = sum / l[c * dim + c];
                }
            }
        }
        Ok(DenseChol { dim, l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The factor itself, row-major with zeros above the diagonal.
    pub fn l(&self) -> &[f64] {
        &self.l
    }

    /// log det A = 2·Σ log L_kk.
    pub fn log_det(&self) -> f64 {
        (0..self.dim)
            .map(|k| self.l[k * self.dim + k].ln())
            .sum::<f64>()
            * 2.0
    }

    /// Solves `L·y = b` in place.
    pub fn forward_in_place(&self, b: &mut [f64]) {
        let n = self.dim;
        for r in 0..n {
            let mut sum = b[r];
            for k in 0..r {
                sum -= self.l[r * n + k] * b[k];
            }
            b[r] = sum / self.l[r * n + r];
        }
    }

    /// Solves `L′·x = y` in place.
    pub fn backward_in_place(&self, b: &mut [f64]) {
        let n = self.dim;
        for r in (0..n).rev() {
            let mut sum = b[r];
            for k in (r + 1)..n {
                sum -= self.l[k * n + r] * b[k];
            }
            b[r] = sum / self.l[r * n + r];
        }
    }

    /// Solves `A·x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, DenseError> {
        if b.len() != self.dim {
            return Err(DenseError::LengthMismatch {
                got: b.len(),
                expected: self.dim,
            });
        }
        let mut x = b.to_vec();
        self.forward_in_place(&mut x);
        self.backward_in_place(&mut x);
        Ok(x)
    }

    /// Dense inverse `A⁻¹`, row-major.
    pub fn inverse(&self) -> Vec<f64> {
        let n = self.dim;
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for c in 0..n {
            e.fill(0.0);
            e[c] = 1.0;
            self.forward_in_place(&mut e);
            self.backward_in_place(&mut e);
            for r in 0..n {
                inv[r * n + c] = e[r];
            }
        }
        inv
    }

    /// Quadratic form `v′·A⁻¹·v` via one forward solve: ‖L⁻¹v‖².
    pub fn inv_quad_form(&self, v: &[f64]) -> Result<f64, DenseError> {
        if v.len() != self.dim {
            return Err(DenseError::LengthMismatch {
                got: v.len(),
                expected: self.dim,
            });
        }
        let mut w = v.to_vec();
        self.forward_in_place(&mut w);
        Ok(w.iter().map(|x| x * x).sum())
    }

    /// Draws from N(mean, A⁻¹) treating the factored matrix as a precision:
    /// mean + L⁻ᵀ·z with z standard normal.
    pub fn sample_precision<R: Rng + ?Sized>(&self, mean: &[f64], rng: &mut R) -> Vec<f64> {
        assert_eq!(mean.len(), self.dim);
        let mut z: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        self.backward_in_place(&mut z);
        for (x, m) in z.iter_mut().zip(mean) {
            *x += m;
        }
        z
    }

    /// Draws from N(mean, A) treating the factored matrix as a covariance:
    /// mean + L·z with z standard normal.
    pub fn sample_covariance<R: Rng + ?Sized>(&self, mean: &[f64], rng: &mut R) -> Vec<f64> {
        assert_eq!(mean.len(), self.dim);
        let n = self.dim;
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut x = mean.to_vec();
        for r in 0..n {
            for k in 0..=r {
                x[r] += self.l[r * n + k] * z[k];
            }
        }
        x
    }
}

/// Row-major symmetric matrix-vector product contribution helpers used by
/// the conjugate updates: `out = aᵀ·b` for an n×k design `a` (row-major)
/// and a length-n vector `b`.
pub fn design_t_vec(a: &[f64], n: usize, k: usize, b: &[f64], out: &mut [f64]) {
    assert_eq!(a.len(), n * k);
    assert_eq!(b.len(), n);
    assert_eq!(out.len(), k);
    out.fill(0.0);
    for i in 0..n {
        let row = &a[i * k..(i + 1) * k];
        let bi = b[i];
        for (o, v) in out.iter_mut().zip(row) {
            *o += v * bi;
        }
    }
}

/// Gram matrix `aᵀ·a` (k×k, row-major) of an n×k row-major design.
pub fn gram(a: &[f64], n: usize, k: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * k);
    let mut g = vec![0.0; k * k];
    for i in 0..n {
        let row = &a[i * k..(i + 1) * k];
        for r in 0..k {
            for c in 0..k {
                g[r * k + c] += row[r] * row[c];
            }
        }
    }
    g
}
