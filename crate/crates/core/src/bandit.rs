//! Modified Exp3 over the OLPC grid with a learned kernel between arms, and
//! meta-training of the policy parameters by exact expected reward.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::prior::feature_kernel;
use crate::meta_bo::{MetaDataset, MetaTrainOutput, TaskRecord};
use crate::nn::{Activation, Mlp};
use crate::objective::Objective;
use crate::rng::rng_from_seed;
use crate::trace::Trace;

pub const DEFAULT_OMEGA: f64 = 0.3;

/// Kernel network `phi`, mixing weight `omega` and softmax temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditPolicyParams {
    pub kernel_net: Mlp,
    pub omega: f64,
    pub temperature: f64,
}

impl BanditPolicyParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::InvalidArgument(format!("omega must lie in [0, 1], got {}", self.omega)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }

    /// RBF kernel `exp(-||x - x'||^2 / (2 l^2))` realized as a linear kernel net.
    pub fn rbf(input_dim: usize, lengthscale: f64, omega: f64, temperature: f64) -> Result<Self> {
        let s = 1.0 / (std::f64::consts::SQRT_2 * lengthscale);
        let mut p = vec![0.0; input_dim * input_dim + input_dim];
        for i in 0..input_dim {
            p[i * input_dim + i] = s;
        }
        let params =
            Self { kernel_net: Mlp::from_params(&[input_dim, input_dim], Activation::Tanh, p)?, omega, temperature };
        params.validate()?;
        Ok(params)
    }

    /// Glorot-initialized tanh kernel net `[in, hidden.., feature_dim]`.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        omega: f64,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(feature_dim);
        let params = Self { kernel_net: Mlp::glorot(&sizes, Activation::Tanh, rng)?, omega, temperature };
        params.validate()?;
        Ok(params)
    }

    pub fn n_params(&self) -> usize {
        self.kernel_net.n_params() + 1
    }

    /// Kernel-net parameters followed by `omega`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.kernel_net.params().to_vec();
        p.push(self.omega);
        p
    }

    /// Sets parameters from a flat vector, clamping `omega` into `[0, 1]`.
    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::DimensionMismatch { expected: self.n_params(), got: p.len() });
        }
        let m = self.kernel_net.n_params();
        self.kernel_net.set_params(&p[..m])?;
        self.omega = p[m].clamp(0.0, 1.0);
        Ok(())
    }

    /// Kernel features of every arm.
    pub fn arm_features(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        inputs.iter().map(|x| self.kernel_net.forward(x)).collect()
    }

    /// Kernel net file plus `policy.txt` with omega and temperature.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.kernel_net.save(&dir.join("kernel_net.bin"))?;
        std::fs::write(
            dir.join("policy.txt"),
            format!("omega={:?}\ntemperature={:?}\n", self.omega, self.temperature),
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let kernel_net = Mlp::load(&dir.join("kernel_net.bin"))?;
        let text = std::fs::read_to_string(dir.join("policy.txt"))?;
        let mut omega = None;
        let mut temperature = None;
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                let v: f64 = v.trim().parse().map_err(|e| Error::Parse(format!("policy.txt {k}: {e}")))?;
                match k.trim() {
                    "omega" => omega = Some(v),
                    "temperature" => temperature = Some(v),
                    _ => {}
                }
            }
        }
        let p = Self {
            kernel_net,
            omega: omega.ok_or_else(|| Error::Parse("policy.txt: missing omega".into()))?,
            temperature: temperature.ok_or_else(|| Error::Parse("policy.txt: missing temperature".into()))?,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pull {
    pub arm: usize,
    pub value: f64,
    /// Probability with which `arm` was drawn at that round.
    pub prob: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BanditHistory {
    pub rounds: Vec<Pull>,
}

impl BanditHistory {
    pub fn from_task(task: &TaskRecord) -> Self {
        let rounds =
            (0..task.len()).map(|i| Pull { arm: task.arms[i], value: task.values[i], prob: task.probs[i] }).collect();
        Self { rounds }
    }

    /// Largest absolute observed value, or 1 if there is none.
    pub fn value_scale(&self) -> f64 {
        let m = self.rounds.iter().fold(0.0f64, |m, p| m.max(p.value.abs()));
        if m > 0.0 {
            m
        } else {
            1.0
        }
    }

    fn validate(&self, n_arms: usize) -> Result<()> {
        for p in &self.rounds {
            if !(p.prob > 0.0 && p.prob <= 1.0) {
                return Err(Error::InvalidArgument(format!("stored probability {} outside (0, 1]", p.prob)));
            }
            if p.arm >= n_arms {
                return Err(Error::InvalidArgument(format!("arm {} out of range {n_arms}", p.arm)));
            }
        }
        Ok(())
    }
}

/// `G(x) = sum_i k(x_i, x) f_i / (scale p_i)` for an arbitrary kernel over arm indices.
pub fn scores_with_kernel<K: Fn(usize, usize) -> f64>(
    n_arms: usize,
    history: &BanditHistory,
    scale: f64,
    kernel: K,
) -> Result<Vec<f64>> {
    history.validate(n_arms)?;
    let mut g = vec![0.0; n_arms];
    for p in &history.rounds {
        let w = p.value / (scale * p.prob);
        for (x, gx) in g.iter_mut().enumerate() {
            *gx += kernel(p.arm, x) * w;
        }
    }
    Ok(g)
}

/// Scores from precomputed arm features.
pub fn arm_scores(features: &[Vec<f64>], history: &BanditHistory, scale: f64) -> Result<Vec<f64>> {
    scores_with_kernel(features.len(), history, scale, |a, b| feature_kernel(&features[a], &features[b]))
}

/// Softmax of `scores / temperature` with the maximum subtracted.
pub fn softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    let m = scores.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let e: Vec<f64> = scores.iter().map(|s| ((s - m) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `(1 - omega) softmax(G / temperature) + omega / N`.
pub fn policy_probs(scores: &[f64], omega: f64, temperature: f64) -> Vec<f64> {
    let n = scores.len() as f64;
    softmax(scores, temperature).into_iter().map(|s| (1.0 - omega) * s + omega / n).collect()
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave u just above the total; fall back to the last positive entry.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Sample, observe, record, repeated `t_max` times. Rewards enter the scores
/// divided by the running maximum of `|f|`.
pub fn run_mab<O: Objective + ?Sized>(
    objective: &mut O,
    inputs: &[Vec<f64>],
    params: &BanditPolicyParams,
    t_max: usize,
    seed: u64,
) -> Result<Trace> {
    if t_max == 0 {
        return Err(Error::InvalidArgument("t_max must be at least 1".into()));
    }
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no arms to choose from".into()));
    }
    params.validate()?;
    let feats = params.arm_features(inputs)?;
    let n = feats.len();
    let mut rng = rng_from_seed(seed);
    // Unscaled sums of k(x_i, x) f_i / p_i.
    let mut raw_scores = vec![0.0; n];
    let mut scale = 0.0f64;
    let mut trace = Trace::new();
    for round in 1..=t_max {
        let s = if scale > 0.0 { scale } else { 1.0 };
        let g: Vec<f64> = raw_scores.iter().map(|v| v / s).collect();
        let probs = policy_probs(&g, params.omega, params.temperature);
        let arm = sample_index(&probs, &mut rng);
        let p = probs[arm];
        if !(p > 0.0) {
            return Err(Error::Objective { round, message: "sampled an arm with zero probability".into() });
        }
        let y = objective.observe(arm, round).map_err(|e| match e {
            Error::Objective { .. } => e,
            other => Error::Objective { round, message: other.to_string() },
        })?;
        if !y.is_finite() {
            return Err(Error::Objective { round, message: format!("non-finite observation {y}") });
        }
        trace.push(arm, y);
        scale = scale.max(y.abs());
        let w = y / p;
        let fa = &feats[arm];
        for (x, r) in raw_scores.iter_mut().enumerate() {
            *r += feature_kernel(fa, &feats[x]) * w;
        }
    }
    Ok(trace)
}

/// Per-task pieces of the meta-loss: loss, upstream gradient on each arm's
/// features and derivative with respect to omega, all unweighted.
pub(crate) struct TaskMabTerms {
    pub loss: f64,
    pub feature_grads: Vec<Vec<f64>>,
    pub d_omega: f64,
}

fn task_rewards(task: &TaskRecord, n_arms: usize) -> Result<Vec<f64>> {
    let r = task.arm_rewards.as_ref().ok_or_else(|| Error::InvalidArgument("task has no per-arm rewards".into()))?;
    if r.len() != n_arms {
        return Err(Error::DimensionMismatch { expected: n_arms, got: r.len() });
    }
    let scale = task.value_scale();
    Ok(r.iter().map(|v| v / scale).collect())
}

/// Expected normalized reward `-sum_x p(x) r(x)` of one task, and optionally its
/// gradient. The gradient is the exact score-function sum
/// `-sum_x p(x) r(x) grad log p(x)`, which equals `-grad sum_x p(x) r(x)`.
pub(crate) fn task_mab_terms(
    feats: &[Vec<f64>],
    omega: f64,
    temperature: f64,
    task: &TaskRecord,
    with_grad: bool,
) -> Result<TaskMabTerms> {
    let n = feats.len();
    let rewards = task_rewards(task, n)?;
    let history = BanditHistory::from_task(task);
    let scale = task.value_scale();
    let g = arm_scores(feats, &history, scale)?;
    let s = softmax(&g, temperature);
    let mean_r = rewards.iter().sum::<f64>() / n as f64;
    let soft_r: f64 = s.iter().zip(&rewards).map(|(a, b)| a * b).sum();
    let loss = -((1.0 - omega) * soft_r + omega * mean_r);
    if !with_grad {
        return Ok(TaskMabTerms { loss, feature_grads: Vec::new(), d_omega: 0.0 });
    }
    let d_omega = soft_r - mean_r;
    let dim = feats.first().map_or(0, Vec::len);
    let mut up = vec![vec![0.0; dim]; n];
    let coef = -(1.0 - omega) / temperature;
    for p in &history.rounds {
        let w = p.value / (scale * p.prob);
        let fa = &feats[p.arm];
        for y in 0..n {
            let dg = coef * s[y] * (rewards[y] - soft_r);
            if dg == 0.0 {
                continue;
            }
            let k = feature_kernel(fa, &feats[y]);
            let c = dg * w * -2.0 * k;
            if c == 0.0 || p.arm == y {
                continue;
            }
            for d in 0..dim {
                let diff = fa[d] - feats[y][d];
                up[p.arm][d] += c * diff;
                up[y][d] -= c * diff;
            }
        }
    }
    Ok(TaskMabTerms { loss, feature_grads: up, d_omega })
}

/// `-(1/N) sum_n sum_x p(x | history_n) f_n(x)` with rewards normalized by
/// each task's history maximum.
pub fn meta_mab_loss(params: &BanditPolicyParams, data: &MetaDataset, inputs: &[Vec<f64>]) -> Result<f64> {
    data.validate()?;
    params.validate()?;
    let feats = params.arm_features(inputs)?;
    let parts = data
        .tasks
        .par_iter()
        .map(|t| task_mab_terms(&feats, params.omega, params.temperature, t, false).map(|r| r.loss))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.iter().sum::<f64>() / data.len() as f64)
}

/// Backpropagates per-arm feature gradients through the kernel net.
pub(crate) fn backprop_features(net: &Mlp, inputs: &[Vec<f64>], up: &[Vec<f64>], grad: &mut [f64]) -> Result<()> {
    for (x, u) in inputs.iter().zip(up) {
        if u.iter().all(|v| *v == 0.0) {
            continue;
        }
        let cache = net.forward_cached(x)?;
        net.accumulate_gradient(&cache, u, grad)?;
    }
    Ok(())
}

/// Loss and gradient over `(kernel-net parameters, omega)`.
pub fn meta_mab_grad(params: &BanditPolicyParams, data: &MetaDataset, inputs: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    data.validate()?;
    params.validate()?;
    let feats = params.arm_features(inputs)?;
    let n_tasks = data.len() as f64;
    let parts = data
        .tasks
        .par_iter()
        .map(|t| task_mab_terms(&feats, params.omega, params.temperature, t, true))
        .collect::<Result<Vec<_>>>()?;
    let dim = params.kernel_net.output_dim();
    let mut up = vec![vec![0.0; dim]; feats.len()];
    let mut loss = 0.0;
    let mut d_omega = 0.0;
    for part in parts {
        loss += part.loss / n_tasks;
        d_omega += part.d_omega / n_tasks;
        for (a, b) in up.iter_mut().zip(&part.feature_grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y / n_tasks;
            }
        }
    }
    let mut grad = vec![0.0; params.n_params()];
    let m = params.kernel_net.n_params();
    backprop_features(&params.kernel_net, inputs, &up, &mut grad[..m])?;
    grad[m] = d_omega;
    Ok((loss, grad))
}

/// Gradient descent on the meta-loss with `omega` clamped to `[0, 1]` after each step.
pub fn meta_mab_train(
    data: &MetaDataset,
    inputs: &[Vec<f64>],
    init: &BanditPolicyParams,
    eta: f64,
    steps: usize,
) -> Result<MetaTrainOutput<BanditPolicyParams>> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {eta}")));
    }
    let mut params = init.clone();
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        let (loss, grad) = meta_mab_grad(&params, data, inputs)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        losses.push(loss);
        let mut p = params.flat_params();
        for (pi, gi) in p.iter_mut().zip(&grad) {
            *pi -= eta * gi;
        }
        params.set_flat_params(&p)?;
    }
    let last = meta_mab_loss(&params, data, inputs)?;
    if !last.is_finite() {
        return Err(Error::NonFiniteLoss { step: steps });
    }
    losses.push(last);
    Ok(MetaTrainOutput { params, losses })
}
