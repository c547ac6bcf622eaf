//! The discrete OLPC search space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowest and highest `P0` of the full table, in dBm. Used for input scaling.
pub const P0_MIN_DBM: f64 = -202.0;
pub const P0_MAX_DBM: f64 = 24.0;
pub const ALPHA_TABLE: [f64; 8] = [0.0, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// A candidate OLPC setting. Vectors hold one entry per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlpcPoint {
    pub p0_dbm: Vec<f64>,
    pub alpha: Vec<f64>,
    pub grid_index: usize,
}

/// Allowed `(P0, alpha)` values. With `shared_across_cells` every cell uses
/// the same pair and arm `i` is `(p0_values[i / |alpha|], alpha_values[i % |alpha|])`.
/// Otherwise the index is mixed-radix over cells, cell 0 most significant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlpcGrid {
    p0_values: Vec<f64>,
    alpha_values: Vec<f64>,
    shared_across_cells: bool,
    n_cells: usize,
}

impl OlpcGrid {
    pub fn new(p0_values: Vec<f64>, alpha_values: Vec<f64>, n_cells: usize, shared_across_cells: bool) -> Result<Self> {
        if p0_values.is_empty() || alpha_values.is_empty() {
            return Err(Error::InvalidArgument("grid value lists must be non-empty".into()));
        }
        if n_cells == 0 {
            return Err(Error::InvalidArgument("grid needs at least one cell".into()));
        }
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        if !increasing(&p0_values) || !increasing(&alpha_values) {
            return Err(Error::InvalidArgument("grid values must be strictly increasing".into()));
        }
        if alpha_values.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidArgument("alpha values must lie in [0, 1]".into()));
        }
        if !shared_across_cells {
            let per = (p0_values.len() * alpha_values.len()) as f64;
            if per.powi(n_cells as i32) > usize::MAX as f64 {
                return Err(Error::InvalidArgument("per-cell grid too large to index".into()));
            }
        }
        Ok(Self { p0_values, alpha_values, shared_across_cells, n_cells })
    }

    /// The full table: P0 in -202..=24 dBm step 2, alpha in {0, 0.4, ..., 1.0}.
    pub fn table(n_cells: usize, shared_across_cells: bool) -> Self {
        let p0 = (0..114).map(|i| P0_MIN_DBM + 2.0 * i as f64).collect();
        Self::new(p0, ALPHA_TABLE.to_vec(), n_cells, shared_across_cells).expect("static table is valid")
    }

    /// Shared grid over `n_cells` cells.
    pub fn shared(n_cells: usize) -> Self {
        Self::table(n_cells, true)
    }

    /// Keeps every `step`-th P0 value (starting with the first).
    pub fn subsample_p0(&self, step: usize) -> Result<Self> {
        if step == 0 {
            return Err(Error::InvalidArgument("step must be positive".into()));
        }
        let p0 = self.p0_values.iter().step_by(step).copied().collect();
        Self::new(p0, self.alpha_values.clone(), self.n_cells, self.shared_across_cells)
    }

    pub fn p0_values(&self) -> &[f64] {
        &self.p0_values
    }

    pub fn alpha_values(&self) -> &[f64] {
        &self.alpha_values
    }

    pub fn shared_across_cells(&self) -> bool {
        self.shared_across_cells
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    fn pairs(&self) -> usize {
        self.p0_values.len() * self.alpha_values.len()
    }

    pub fn len(&self) -> usize {
        if self.shared_across_cells {
            self.pairs()
        } else {
            self.pairs().pow(self.n_cells as u32)
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn pair(&self, pair_index: usize) -> (f64, f64) {
        let na = self.alpha_values.len();
        (self.p0_values[pair_index / na], self.alpha_values[pair_index % na])
    }

    fn cell_pairs(&self, index: usize) -> Vec<usize> {
        if self.shared_across_cells {
            return vec![index; self.n_cells];
        }
        let base = self.pairs();
        let mut rest = index;
        let mut out = vec![0; self.n_cells];
        for c in (0..self.n_cells).rev() {
            out[c] = rest % base;
            rest /= base;
        }
        out
    }

    pub fn point(&self, index: usize) -> Result<OlpcPoint> {
        if index >= self.len() {
            return Err(Error::InvalidArgument(format!("grid index {index} out of range {}", self.len())));
        }
        let (p0_dbm, alpha) = self.cell_pairs(index).into_iter().map(|p| self.pair(p)).unzip();
        Ok(OlpcPoint { p0_dbm, alpha, grid_index: index })
    }

    /// Index of a point given its per-cell values, if every value is on the grid.
    pub fn index_of(&self, p0_dbm: &[f64], alpha: &[f64]) -> Option<usize> {
        if p0_dbm.len() != self.n_cells || alpha.len() != self.n_cells {
            return None;
        }
        let find = |vals: &[f64], x: f64| vals.iter().position(|v| (v - x).abs() < 1e-9);
        let na = self.alpha_values.len();
        let mut pair_idx = Vec::with_capacity(self.n_cells);
        for c in 0..self.n_cells {
            let i = find(&self.p0_values, p0_dbm[c])?;
            let j = find(&self.alpha_values, alpha[c])?;
            pair_idx.push(i * na + j);
        }
        if self.shared_across_cells {
            if pair_idx.iter().all(|p| *p == pair_idx[0]) {
                Some(pair_idx[0])
            } else {
                None
            }
        } else {
            Some(pair_idx.iter().fold(0, |acc, p| acc * self.pairs() + p))
        }
    }

    /// Surrogate-model input: per cell `(P0 scaled to [0, 1] over the full table range, alpha)`.
    /// A shared grid yields a single pair.
    pub fn input(&self, index: usize) -> Result<Vec<f64>> {
        let point = self.point(index)?;
        let cells = if self.shared_across_cells { 1 } else { self.n_cells };
        let mut x = Vec::with_capacity(2 * cells);
        for c in 0..cells {
            x.push(scale_p0(point.p0_dbm[c]));
            x.push(point.alpha[c]);
        }
        Ok(x)
    }

    /// Inputs of every arm, in index order.
    pub fn inputs(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.input(i).expect("index in range")).collect()
    }

    pub fn input_dim(&self) -> usize {
        if self.shared_across_cells {
            2
        } else {
            2 * self.n_cells
        }
    }
}

pub fn scale_p0(p0_dbm: f64) -> f64 {
    (p0_dbm - P0_MIN_DBM) / (P0_MAX_DBM - P0_MIN_DBM)
}
