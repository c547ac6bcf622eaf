//! GP regression on feature-mapped inputs.

use nalgebra::{DMatrix, DVector};

use super::prior::feature_kernel;
use crate::error::{Error, Result};
use crate::linalg::cholesky_with_jitter;

/// GP posterior conditioned on a history. Points are given as
/// `(prior mean, feature vector)`; the kernel is `exp(-||f - f'||^2)` with unit
/// signal variance. The Cholesky factor of `K + (noise_var + jitter) I` is
/// extended row by row and rebuilt with more jitter when an extension fails.
#[derive(Debug, Clone)]
pub struct GpModel {
    noise_var: f64,
    dim: usize,
    feats: Vec<Vec<f64>>,
    means: Vec<f64>,
    values: Vec<f64>,
    l: DMatrix<f64>,
    jitter: f64,
    /// `L^-1 (y - m)`. The posterior mean is `m* + (L^-1 k*) . z`, which stays
    /// accurate at training points when the Gram matrix is nearly singular.
    z: DVector<f64>,
    rebuilds: usize,
}

impl GpModel {
    pub fn new(feature_dim: usize, noise_var: f64) -> Result<Self> {
        if !(noise_var >= 0.0) || !noise_var.is_finite() {
            return Err(Error::InvalidArgument(format!("noise variance must be >= 0, got {noise_var}")));
        }
        Ok(Self {
            noise_var,
            dim: feature_dim,
            feats: Vec::new(),
            means: Vec::new(),
            values: Vec::new(),
            l: DMatrix::zeros(0, 0),
            jitter: 0.0,
            z: DVector::zeros(0),
            rebuilds: 0,
        })
    }

    pub fn fit(feature_dim: usize, noise_var: f64, means: &[f64], feats: &[Vec<f64>], values: &[f64]) -> Result<Self> {
        if means.len() != feats.len() || values.len() != feats.len() {
            return Err(Error::DimensionMismatch { expected: feats.len(), got: values.len() });
        }
        let mut m = Self::new(feature_dim, noise_var)?;
        for i in 0..feats.len() {
            m.push_point(means[i], &feats[i], values[i])?;
        }
        m.solve_residual();
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Number of full refactorizations so far. Cached solves against the
    /// factor must be rebuilt when this changes.
    pub fn rebuilds(&self) -> usize {
        self.rebuilds
    }

    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn whitened_residual(&self) -> &DVector<f64> {
        &self.z
    }

    fn diag(&self) -> f64 {
        1.0 + self.noise_var + self.jitter
    }

    fn push_point(&mut self, mean: f64, feat: &[f64], value: f64) -> Result<()> {
        if feat.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: feat.len() });
        }
        if !value.is_finite() || !mean.is_finite() {
            return Err(Error::InvalidArgument("GP observations must be finite".into()));
        }
        let t = self.len();
        let k: Vec<f64> = self.feats.iter().map(|f| feature_kernel(f, feat)).collect();
        let mut row = k.clone();
        for i in 0..t {
            let s: f64 = row[..i].iter().enumerate().map(|(j, r)| self.l[(i, j)] * r).sum();
            row[i] = (row[i] - s) / self.l[(i, i)];
        }
        let d2 = self.diag() - row.iter().map(|v| v * v).sum::<f64>();
        self.feats.push(feat.to_vec());
        self.means.push(mean);
        self.values.push(value);
        if d2 > 0.0 && d2.is_finite() {
            let mut l = DMatrix::zeros(t + 1, t + 1);
            l.view_mut((0, 0), (t, t)).copy_from(&self.l);
            for j in 0..t {
                l[(t, j)] = row[j];
            }
            l[(t, t)] = d2.sqrt();
            self.l = l;
            Ok(())
        } else {
            self.rebuild()
        }
    }

    fn rebuild(&mut self) -> Result<()> {
        let t = self.len();
        let mut gram = DMatrix::zeros(t, t);
        for i in 0..t {
            for j in 0..=i {
                let v = feature_kernel(&self.feats[i], &self.feats[j]);
                gram[(i, j)] = v;
                gram[(j, i)] = v;
            }
            gram[(i, i)] += self.noise_var;
        }
        let chol = cholesky_with_jitter(&gram)?;
        // Keep jitter monotone so earlier rows stay valid under later extensions.
        if chol.jitter < self.jitter {
            for i in 0..t {
                gram[(i, i)] += self.jitter;
            }
            self.l = cholesky_with_jitter(&gram)?.l();
        } else {
            self.jitter = chol.jitter;
            self.l = chol.l();
        }
        self.rebuilds += 1;
        Ok(())
    }

    fn solve_residual(&mut self) {
        let r = DVector::from_iterator(self.len(), self.values.iter().zip(&self.means).map(|(y, m)| y - m));
        self.z = self.l.solve_lower_triangular(&r).expect("factor has positive diagonal");
    }

    /// Conditions on one more observation.
    pub fn push(&mut self, mean: f64, feat: &[f64], value: f64) -> Result<()> {
        self.push_point(mean, feat, value)?;
        self.solve_residual();
        Ok(())
    }

    /// Replaces the observed values (e.g. after rescaling) keeping the inputs.
    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: values.len() });
        }
        self.values = values.to_vec();
        self.solve_residual();
        Ok(())
    }

    /// Cross-covariances between the history and a query.
    pub fn cross_kernel(&self, feat: &[f64]) -> Vec<f64> {
        self.feats.iter().map(|f| feature_kernel(f, feat)).collect()
    }

    /// Posterior mean and variance of the latent objective at a query.
    pub fn posterior(&self, mean: f64, feat: &[f64]) -> Result<(f64, f64)> {
        if feat.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: feat.len() });
        }
        if self.is_empty() {
            return Ok((mean, 1.0));
        }
        let k = DVector::from_vec(self.cross_kernel(feat));
        let v = self.l.solve_lower_triangular(&k).expect("factor has positive diagonal");
        let mu = mean + v.dot(&self.z);
        let var = (1.0 - v.norm_squared()).max(0.0);
        Ok((mu, var))
    }
}
