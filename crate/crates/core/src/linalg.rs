//! Small dense helpers: complex Hermitian Cholesky for the KPI hot path and a
//! jittered real Cholesky for GP Gram matrices.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// In-place lower Cholesky of a row-major `n x n` Hermitian matrix.
/// Returns `false` if the matrix is not numerically positive definite.
/// Only the lower triangle is read; the upper triangle is left untouched.
pub fn cholesky_hermitian(a: &mut [Complex64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j].re;
        for k in 0..j {
            d -= a[j * n + k].norm_sqr();
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = Complex64::new(d, 0.0);
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k].conj();
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

/// Solves `L X = B` in place for lower-triangular `L` (row-major `n x n`) and
/// row-major `B` of shape `n x m`.
pub fn forward_substitute(l: &[Complex64], n: usize, b: &mut [Complex64], m: usize) {
    for i in 0..n {
        for k in 0..i {
            let lik = l[i * n + k];
            if lik == Complex64::new(0.0, 0.0) {
                continue;
            }
            for j in 0..m {
                let v = b[k * m + j];
                b[i * m + j] -= lik * v;
            }
        }
        let d = l[i * n + i].re;
        for j in 0..m {
            b[i * m + j] /= d;
        }
    }
}

/// `log2 det` from a Cholesky factor.
pub fn log2_det_from_cholesky(l: &[Complex64], n: usize) -> f64 {
    (0..n).map(|i| 2.0 * l[i * n + i].re.log2()).sum()
}

/// Result of a jittered factorization.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    pub factor: nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>,
    pub jitter: f64,
}

/// Jitter schedule: exact first, then 1e-8 growing by 10x up to 1e-4.
pub const JITTER_SCHEDULE: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Cholesky of a symmetric matrix, adding diagonal jitter on failure.
pub fn cholesky_with_jitter(matrix: &DMatrix<f64>) -> Result<JitteredCholesky> {
    for &jitter in &JITTER_SCHEDULE {
        let mut m = matrix.clone();
        if jitter > 0.0 {
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
        }
        if let Some(factor) = m.cholesky() {
            let ok = factor.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0);
            if ok {
                return Ok(JitteredCholesky { factor, jitter });
            }
        }
    }
    Err(Error::IllConditioned { jitter: *JITTER_SCHEDULE.last().unwrap(), condition: condition_estimate(matrix) })
}

/// Ratio of largest to smallest absolute eigenvalue (infinite when singular).
pub fn condition_estimate(matrix: &DMatrix<f64>) -> f64 {
    if matrix.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let eig = matrix.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

impl JitteredCholesky {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.factor.inverse()
    }

    pub fn ln_det(&self) -> f64 {
        2.0 * self.factor.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.factor.l()
    }
}
