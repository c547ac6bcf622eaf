//! Empirical objective, noisy observations and the exhaustive-search oracle.

use std::io::Write;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::{OlpcGrid, OlpcPoint};
use super::kpi::KpiEvaluator;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sim::{Configuration, CsiDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub point: OlpcPoint,
    pub value: f64,
    pub round: usize,
}

/// Mean KPI over the dataset.
pub fn empirical_objective(point: &OlpcPoint, dataset: &CsiDataset, config: &Configuration) -> Result<f64> {
    KpiEvaluator::new(config, dataset)?.empirical(point)
}

fn gaussian_noise(noise_sigma: f64, seed: u64) -> Result<f64> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise_sigma must be >= 0, got {noise_sigma}")));
    }
    if noise_sigma == 0.0 {
        return Ok(0.0);
    }
    let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(normal.sample(&mut rng_from_seed(seed)))
}

/// Empirical objective plus `N(0, noise_sigma^2)` noise drawn from `seed`.
pub fn observe(
    point: &OlpcPoint,
    dataset: &CsiDataset,
    config: &Configuration,
    noise_sigma: f64,
    seed: u64,
) -> Result<Observation> {
    let value = empirical_objective(point, dataset, config)? + gaussian_noise(noise_sigma, seed)?;
    Ok(Observation { point: point.clone(), value, round: 0 })
}

/// Objective value of every arm of a grid on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landscape {
    pub grid: OlpcGrid,
    pub values: Vec<f64>,
}

impl Landscape {
    /// Evaluates every arm. Arms are spread over the rayon pool and gathered in index order.
    pub fn compute(dataset: &CsiDataset, config: &Configuration, grid: &OlpcGrid) -> Result<Self> {
        if grid.n_cells() != config.n_cells {
            return Err(Error::DimensionMismatch { expected: config.n_cells, got: grid.n_cells() });
        }
        let ev = KpiEvaluator::new(config, dataset)?;
        let values =
            (0..grid.len()).into_par_iter().map(|i| ev.empirical(&grid.point(i)?)).collect::<Result<Vec<_>>>()?;
        Ok(Self { grid: grid.clone(), values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Maximizing arm, lowest index on ties.
    pub fn oracle_index(&self) -> usize {
        argmax_lowest(&self.values)
    }

    pub fn oracle_value(&self) -> f64 {
        self.values[self.oracle_index()]
    }

    /// Arms that are strictly better than every (P0, alpha) 4-neighbor. Shared grids only.
    pub fn strict_local_maxima(&self) -> Vec<usize> {
        let np = self.grid.p0_values().len();
        let na = self.grid.alpha_values().len();
        if !self.grid.shared_across_cells() {
            return Vec::new();
        }
        let mut out = Vec::new();
        for i in 0..np {
            for j in 0..na {
                let v = self.values[i * na + j];
                let mut neighbors = Vec::with_capacity(4);
                if i > 0 {
                    neighbors.push((i - 1) * na + j);
                }
                if i + 1 < np {
                    neighbors.push((i + 1) * na + j);
                }
                if j > 0 {
                    neighbors.push(i * na + j - 1);
                }
                if j + 1 < na {
                    neighbors.push(i * na + j + 1);
                }
                if neighbors.iter().all(|n| self.values[*n] < v) {
                    out.push(i * na + j);
                }
            }
        }
        out
    }

    /// CSV with header `grid_index,p0_dbm,alpha,kpi`. Per-cell grids list cell 0's pair.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "grid_index,p0_dbm,alpha,kpi")?;
        for (i, v) in self.values.iter().enumerate() {
            let p = self.grid.point(i)?;
            writeln!(w, "{},{},{},{}", i, p.p0_dbm[0], p.alpha[0], v)?;
        }
        Ok(())
    }
}

/// Index of the largest value, lowest index on ties. NaNs are never selected
/// unless every value is NaN.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] || (values[best].is_nan() && !v.is_nan()) {
            best = i;
        }
    }
    best
}

/// Exhaustive search over the grid.
pub fn exhaustive_oracle(dataset: &CsiDataset, config: &Configuration, grid: &OlpcGrid) -> Result<(OlpcPoint, f64)> {
    let land = Landscape::compute(dataset, config, grid)?;
    let i = land.oracle_index();
    Ok((grid.point(i)?, land.values[i]))
}

/// Black-box objective queried by the optimizers, by grid index.
pub trait Objective {
    fn observe(&mut self, grid_index: usize, round: usize) -> Result<f64>;
}

impl<F: FnMut(usize, usize) -> Result<f64>> Objective for F {
    fn observe(&mut self, grid_index: usize, round: usize) -> Result<f64> {
        self(grid_index, round)
    }
}

/// Precomputed landscape plus seeded Gaussian observation noise. The noise of
/// round `t` is drawn from `derive_seed(seed, t)`.
#[derive(Debug, Clone)]
pub struct LandscapeObjective<'a> {
    pub landscape: &'a Landscape,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl<'a> LandscapeObjective<'a> {
    pub fn new(landscape: &'a Landscape, noise_sigma: f64, seed: u64) -> Self {
        Self { landscape, noise_sigma, seed }
    }
}

impl Objective for LandscapeObjective<'_> {
    fn observe(&mut self, grid_index: usize, round: usize) -> Result<f64> {
        let v = *self
            .landscape
            .values
            .get(grid_index)
            .ok_or_else(|| Error::Objective { round, message: format!("grid index {grid_index} out of range") })?;
        let noise = gaussian_noise(self.noise_sigma, derive_seed(self.seed, round as u64))
            .map_err(|e| Error::Objective { round, message: e.to_string() })?;
        Ok(v + noise)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_lowest(&[f64::NAN, 0.0]), 1);
    }

    #[test]
    fn noise_free_observation_is_exact() {
        assert_eq!(gaussian_noise(0.0, 1).unwrap(), 0.0);
        assert!(gaussian_noise(-1.0, 1).is_err());
    }
}
