//! Expected improvement.

use serde::{Deserialize, Serialize};

use super::model::GpModel;
use super::prior::ArmTable;
use crate::error::{Error, Result};
use crate::objective::argmax_lowest;

/// `Variance` scales by the posterior variance, `Standard` by the standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EiVariant {
    Variance,
    Standard,
}

impl std::str::FromStr for EiVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variance" => Ok(Self::Variance),
            "standard" => Ok(Self::Standard),
            _ => Err(Error::Parse(format!("unknown EI variant {s:?} (expected variance|standard)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EiParams {
    pub xi: f64,
    pub variant: EiVariant,
}

impl Default for EiParams {
    fn default() -> Self {
        Self { xi: 0.01, variant: EiVariant::Variance }
    }
}

impl EiParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.xi) {
            return Err(Error::InvalidArgument(format!("xi must lie in [0, 1), got {}", self.xi)));
        }
        Ok(())
    }
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// EI from a posterior mean and variance.
pub fn expected_improvement_from(mean: f64, var: f64, best: f64, params: &EiParams) -> f64 {
    let imp = mean - best - params.xi;
    if var <= 0.0 {
        return imp.max(0.0);
    }
    let scale = match params.variant {
        EiVariant::Variance => var,
        EiVariant::Standard => var.sqrt(),
    };
    let delta = imp / scale;
    (imp * std_normal_cdf(delta) + scale * std_normal_pdf(delta)).max(0.0)
}

/// EI of a query given as `(prior mean, features)`.
pub fn expected_improvement(model: &GpModel, mean: f64, feat: &[f64], best: f64, params: &EiParams) -> Result<f64> {
    let (mu, var) = model.posterior(mean, feat)?;
    Ok(expected_improvement_from(mu, var, best, params))
}

/// Arm with the largest EI, lowest index on ties.
pub fn acquisition_argmax(model: &GpModel, arms: &ArmTable, best: f64, params: &EiParams) -> Result<usize> {
    if arms.is_empty() {
        return Err(Error::InvalidArgument("no arms to choose from".into()));
    }
    let ei = (0..arms.len())
        .map(|a| expected_improvement(model, arms.mean(a), arms.feature(a), best, params))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmax_lowest(&ei))
}
