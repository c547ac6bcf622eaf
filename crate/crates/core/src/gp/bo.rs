//! The BO loop over a discrete arm set.

use serde::{Deserialize, Serialize};

use super::acquisition::{expected_improvement_from, EiParams};
use super::model::GpModel;
use super::prior::{feature_kernel, ArmTable};
use crate::error::{Error, Result};
use crate::objective::{argmax_lowest, Objective};
use crate::trace::Trace;

/// How raw KPI values are mapped to GP targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ValueScaling {
    /// Divide by the largest absolute value observed so far.
    RunningMax,
    /// Divide by a constant, e.g. the scale a meta-learned mean was trained on.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    pub t_max: usize,
    pub ei: EiParams,
    pub noise_var: f64,
    pub scaling: ValueScaling,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self { t_max: 100, ei: EiParams::default(), noise_var: 1e-6, scaling: ValueScaling::RunningMax }
    }
}

/// Posterior over every arm, updated incrementally as the history grows.
/// Holds `K(X, arms)` and `L^-1 K(X, arms)` row by row.
#[derive(Debug, Clone)]
pub struct ArmPosterior {
    n_arms: usize,
    kstar: Vec<f64>,
    v: Vec<f64>,
    rows: usize,
    rebuilds: usize,
}

impl ArmPosterior {
    pub fn new(arms: &ArmTable) -> Self {
        Self { n_arms: arms.len(), kstar: Vec::new(), v: Vec::new(), rows: 0, rebuilds: 0 }
    }

    fn solve_row(&mut self, model: &GpModel, t: usize) {
        let l = model.cholesky_factor();
        let a = self.n_arms;
        let mut row = self.kstar[t * a..(t + 1) * a].to_vec();
        for j in 0..t {
            let ltj = l[(t, j)];
            if ltj != 0.0 {
                let vj = &self.v[j * a..(j + 1) * a];
                for (r, x) in row.iter_mut().zip(vj) {
                    *r -= ltj * x;
                }
            }
        }
        let d = l[(t, t)];
        row.iter_mut().for_each(|r| *r /= d);
        self.v.extend(row);
    }

    /// Brings the cache in line with `model`, whose last point is `arm`.
    pub fn extend(&mut self, model: &GpModel, arms: &ArmTable, arm: usize) {
        let f = arms.feature(arm);
        self.kstar.extend((0..self.n_arms).map(|b| feature_kernel(f, arms.feature(b))));
        self.rows += 1;
        if model.rebuilds() != self.rebuilds {
            self.rebuilds = model.rebuilds();
            self.v.clear();
            for t in 0..self.rows {
                self.solve_row(model, t);
            }
        } else {
            self.solve_row(model, self.rows - 1);
        }
    }

    /// Posterior means and variances of all arms.
    pub fn posterior(&self, model: &GpModel, arms: &ArmTable) -> (Vec<f64>, Vec<f64>) {
        let a = self.n_arms;
        let mut mean = arms.means().to_vec();
        let mut var = vec![1.0; a];
        let z = model.whitened_residual();
        for t in 0..self.rows {
            let v = &self.v[t * a..(t + 1) * a];
            let zt = z[t];
            for i in 0..a {
                mean[i] += v[i] * zt;
                var[i] -= v[i] * v[i];
            }
        }
        var.iter_mut().for_each(|v| *v = v.max(0.0));
        (mean, var)
    }
}

fn objective_error(round: usize, e: Error) -> Error {
    match e {
        Error::Objective { .. } => e,
        other => Error::Objective { round, message: other.to_string() },
    }
}

fn scale_of(scaling: ValueScaling, raw: &[f64]) -> f64 {
    match scaling {
        ValueScaling::Fixed(s) => s,
        ValueScaling::RunningMax => {
            let m = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
    }
}

/// Select, observe, condition, repeated `t_max` times. With an empty history
/// the incumbent is taken as 0 so the first pick maximizes the prior EI.
pub fn run_bo<O: Objective + ?Sized>(objective: &mut O, arms: &ArmTable, cfg: &BoConfig) -> Result<Trace> {
    if cfg.t_max == 0 {
        return Err(Error::InvalidArgument("t_max must be at least 1".into()));
    }
    if arms.is_empty() {
        return Err(Error::InvalidArgument("no arms to choose from".into()));
    }
    if let ValueScaling::Fixed(s) = cfg.scaling {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::InvalidArgument(format!("value scale must be positive, got {s}")));
        }
    }
    cfg.ei.validate()?;
    let mut model = GpModel::new(arms.dim(), cfg.noise_var)?;
    let mut cache = ArmPosterior::new(arms);
    let mut raw: Vec<f64> = Vec::with_capacity(cfg.t_max);
    let mut scale = scale_of(cfg.scaling, &raw);
    let mut trace = Trace::new();
    for round in 1..=cfg.t_max {
        let (mean, var) = cache.posterior(&model, arms);
        let best = raw.iter().fold(None, |b: Option<f64>, v| Some(b.map_or(*v, |b| b.max(*v))));
        let best = best.map_or(0.0, |b| b / scale);
        let ei: Vec<f64> =
            mean.iter().zip(&var).map(|(m, v)| expected_improvement_from(*m, *v, best, &cfg.ei)).collect();
        let arm = argmax_lowest(&ei);
        let y = objective.observe(arm, round).map_err(|e| objective_error(round, e))?;
        if !y.is_finite() {
            return Err(Error::Objective { round, message: format!("non-finite observation {y}") });
        }
        raw.push(y);
        trace.push(arm, y);
        let new_scale = scale_of(cfg.scaling, &raw);
        model.push(arms.mean(arm), arms.feature(arm), y / scale)?;
        if new_scale != scale {
            scale = new_scale;
            let scaled: Vec<f64> = raw.iter().map(|v| v / scale).collect();
            model.set_values(&scaled)?;
        }
        cache.extend(&model, arms, arm);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::prior::RbfPrior;

    fn toy_arms(n: usize) -> ArmTable {
        let inputs: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / (n - 1) as f64]).collect();
        ArmTable::from_prior(&RbfPrior::new(1, 0.2, 0.0), &inputs)
    }

    #[test]
    fn cache_matches_direct_posterior() {
        let arms = toy_arms(15);
        let mut model = GpModel::new(1, 1e-6).unwrap();
        let mut cache = ArmPosterior::new(&arms);
        for (arm, y) in [(3, 0.4), (9, -0.2), (3, 0.5), (14, 1.0)] {
            model.push(arms.mean(arm), arms.feature(arm), y).unwrap();
            cache.extend(&model, &arms, arm);
            let (m, v) = cache.posterior(&model, &arms);
            for a in 0..arms.len() {
                let (dm, dv) = model.posterior(arms.mean(a), arms.feature(a)).unwrap();
                assert!((m[a] - dm).abs() < 1e-9 && (v[a] - dv).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_round() {
        let arms = toy_arms(10);
        let mut f = |i: usize, _r: usize| -> Result<f64> { Ok(i as f64) };
        let cfg = BoConfig { t_max: 1, ..BoConfig::default() };
        let tr = run_bo(&mut f, &arms, &cfg).unwrap();
        assert_eq!(tr.len(), 1);
        assert_eq!(tr.rows[0].grid_index, 0);
        assert_eq!(tr.best_index, Some(0));
    }

    #[test]
    fn objective_failure_names_round() {
        let arms = toy_arms(10);
        let mut f = |_i: usize, r: usize| -> Result<f64> {
            if r == 3 {
                Err(Error::InvalidArgument("boom".into()))
            } else {
                Ok(1.0)
            }
        };
        let cfg = BoConfig { t_max: 5, ..BoConfig::default() };
        match run_bo(&mut f, &arms, &cfg) {
            Err(Error::Objective { round, .. }) => assert_eq!(round, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
