//! Meta-learning a GP prior (mean network plus feature-map kernel) from the
//! histories of earlier configurations by minimizing the average per-sample
//! negative log marginal likelihood.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::InterferenceGraph;
use crate::error::{Error, Result};
use crate::gp::prior::{feature_kernel, FeaturePrior};
use crate::linalg::cholesky_with_jitter;
use crate::nn::{Activation, ForwardCache, Mlp};

/// History collected on one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    /// Grid index pulled at each step.
    pub arms: Vec<usize>,
    /// Surrogate input of each pulled arm.
    pub inputs: Vec<Vec<f64>>,
    /// Noisy observed KPI of each pull.
    pub values: Vec<f64>,
    /// Probability with which each arm was drawn.
    pub probs: Vec<f64>,
    /// Objective value of every grid arm, needed by the bandit meta-loss.
    pub arm_rewards: Option<Vec<f64>>,
    pub context: Option<InterferenceGraph>,
}

impl TaskRecord {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.values.len();
        if t == 0 {
            return Err(Error::InvalidArgument("task history must hold at least one observation".into()));
        }
        for (name, n) in [("arms", self.arms.len()), ("inputs", self.inputs.len()), ("probs", self.probs.len())] {
            if n != t {
                return Err(Error::InvalidArgument(format!("task {name} has length {n}, values have {t}")));
            }
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("task values must be finite".into()));
        }
        Ok(())
    }

    /// Largest absolute observed value, or 1 if all are zero.
    pub fn value_scale(&self) -> f64 {
        let m = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if m > 0.0 {
            m
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaDataset {
    pub tasks: Vec<TaskRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TaskEntry {
    history: String,
    rewards: Option<String>,
    graph: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tasks: Vec<TaskEntry>,
}

impl MetaDataset {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::InvalidArgument("meta-dataset has no tasks".into()));
        }
        self.tasks.iter().try_for_each(TaskRecord::validate)
    }

    /// Mean over tasks of the largest absolute observed value.
    pub fn value_scale(&self) -> f64 {
        if self.tasks.is_empty() {
            return 1.0;
        }
        self.tasks.iter().map(TaskRecord::value_scale).sum::<f64>() / self.tasks.len() as f64
    }

    /// Writes `task_NNN.csv` (history), optional `task_NNN_rewards.csv` and
    /// `task_NNN.graph`, plus `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.tasks.len());
        for (n, task) in self.tasks.iter().enumerate() {
            let history = format!("task_{n:03}.csv");
            let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(&history))?);
            let dim = task.inputs.first().map_or(0, Vec::len);
            let inputs: Vec<String> = (0..dim).map(|i| format!("input_{i}")).collect();
            writeln!(w, "step,grid_index,{},value,prob", inputs.join(","))?;
            for t in 0..task.len() {
                let xs: Vec<String> = task.inputs[t].iter().map(|v| format!("{v:?}")).collect();
                writeln!(w, "{},{},{},{:?},{:?}", t, task.arms[t], xs.join(","), task.values[t], task.probs[t])?;
            }
            let rewards = match &task.arm_rewards {
                Some(r) => {
                    let name = format!("task_{n:03}_rewards.csv");
                    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(&name))?);
                    writeln!(w, "grid_index,value")?;
                    for (i, v) in r.iter().enumerate() {
                        writeln!(w, "{i},{v:?}")?;
                    }
                    Some(name)
                }
                None => None,
            };
            let graph = match &task.context {
                Some(g) => {
                    let name = format!("task_{n:03}.graph");
                    g.save(&dir.join(&name))?;
                    Some(name)
                }
                None => None,
            };
            entries.push(TaskEntry { history, rewards, graph });
        }
        let manifest =
            serde_json::to_string_pretty(&Manifest { tasks: entries }).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)
            .map_err(|e| Error::Parse(format!("manifest: {e}")))?;
        let mut tasks = Vec::with_capacity(manifest.tasks.len());
        for entry in manifest.tasks {
            let path: PathBuf = dir.join(&entry.history);
            let text = std::fs::read_to_string(&path)?;
            let mut lines = text.lines();
            let header = lines.next().ok_or_else(|| Error::Parse(format!("{}: empty", path.display())))?;
            let n_cols = header.split(',').count();
            if n_cols < 4 {
                return Err(Error::Parse(format!("{}: bad header", path.display())));
            }
            let dim = n_cols - 4;
            let mut task = TaskRecord {
                arms: Vec::new(),
                inputs: Vec::new(),
                values: Vec::new(),
                probs: Vec::new(),
                arm_rewards: None,
                context: None,
            };
            for line in lines.filter(|l| !l.trim().is_empty()) {
                let cols: Vec<&str> = line.split(',').collect();
                if cols.len() != n_cols {
                    return Err(Error::Parse(format!("{}: row has {} columns", path.display(), cols.len())));
                }
                let f = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{}: {e}", path.display())));
                task.arms.push(cols[1].trim().parse().map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?);
                task.inputs.push(cols[2..2 + dim].iter().map(|s| f(s)).collect::<Result<_>>()?);
                task.values.push(f(cols[2 + dim])?);
                task.probs.push(f(cols[3 + dim])?);
            }
            if let Some(name) = entry.rewards {
                let text = std::fs::read_to_string(dir.join(&name))?;
                let rewards = text
                    .lines()
                    .skip(1)
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| {
                        l.split(',')
                            .nth(1)
                            .ok_or_else(|| Error::Parse(format!("{name}: missing value")))?
                            .trim()
                            .parse::<f64>()
                            .map_err(|e| Error::Parse(format!("{name}: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                task.arm_rewards = Some(rewards);
            }
            if let Some(name) = entry.graph {
                task.context = Some(InterferenceGraph::load(&dir.join(name))?);
            }
            tasks.push(task);
        }
        Ok(Self { tasks })
    }
}

/// Learned GP prior. Values are divided by `value_scale` before the GP sees them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparameters {
    pub mean_net: Mlp,
    pub feature_net: Mlp,
    pub noise_var: f64,
    pub value_scale: f64,
}

/// Default noise floor used during meta-training.
pub const NOISE_FLOOR: f64 = 1e-6;

impl GpHyperparameters {
    /// Mean net `[in, hidden.., 1]` and feature net `[in, hidden.., feature_dim]`, both tanh.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        noise_var: f64,
        value_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut mean_sizes = vec![input_dim];
        mean_sizes.extend_from_slice(hidden);
        let mut feat_sizes = mean_sizes.clone();
        mean_sizes.push(1);
        feat_sizes.push(feature_dim);
        let mean_net = Mlp::glorot(&mean_sizes, Activation::Tanh, rng)?;
        let feature_net = Mlp::glorot(&feat_sizes, Activation::Tanh, rng)?;
        let hp = Self { mean_net, feature_net, noise_var, value_scale };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_var >= 0.0) || !(self.value_scale > 0.0) || !self.value_scale.is_finite() {
            return Err(Error::InvalidArgument("noise_var must be >= 0 and value_scale > 0".into()));
        }
        if self.mean_net.output_dim() != 1 || self.mean_net.input_dim() != self.feature_net.input_dim() {
            return Err(Error::InvalidArgument("mean net must map the feature-net input to a scalar".into()));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.mean_net.n_params() + self.feature_net.n_params()
    }

    /// Mean-net parameters followed by feature-net parameters.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.mean_net.params().to_vec();
        p.extend_from_slice(self.feature_net.params());
        p
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::DimensionMismatch { expected: self.n_params(), got: p.len() });
        }
        let m = self.mean_net.n_params();
        self.mean_net.set_params(&p[..m])?;
        self.feature_net.set_params(&p[m..])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.mean_net.save(&dir.join("mean_net.bin"))?;
        self.feature_net.save(&dir.join("feature_net.bin"))?;
        std::fs::write(
            dir.join("gp.txt"),
            format!("noise_var={:?}\nvalue_scale={:?}\n", self.noise_var, self.value_scale),
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mean_net = Mlp::load(&dir.join("mean_net.bin"))?;
        let feature_net = Mlp::load(&dir.join("feature_net.bin"))?;
        let text = std::fs::read_to_string(dir.join("gp.txt"))?;
        let mut noise_var = None;
        let mut value_scale = None;
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                let v: f64 = v.trim().parse().map_err(|e| Error::Parse(format!("gp.txt {k}: {e}")))?;
                match k.trim() {
                    "noise_var" => noise_var = Some(v),
                    "value_scale" => value_scale = Some(v),
                    _ => {}
                }
            }
        }
        let hp = Self {
            mean_net,
            feature_net,
            noise_var: noise_var.ok_or_else(|| Error::Parse("gp.txt: missing noise_var".into()))?,
            value_scale: value_scale.ok_or_else(|| Error::Parse("gp.txt: missing value_scale".into()))?,
        };
        hp.validate()?;
        Ok(hp)
    }
}

impl FeaturePrior for GpHyperparameters {
    fn input_dim(&self) -> usize {
        self.feature_net.input_dim()
    }

    fn feature_dim(&self) -> usize {
        self.feature_net.output_dim()
    }

    fn mean(&self, x: &[f64]) -> f64 {
        self.mean_net.forward(x).expect("input dimension checked by caller")[0]
    }

    fn features(&self, x: &[f64]) -> Vec<f64> {
        self.feature_net.forward(x).expect("input dimension checked by caller")
    }
}

/// `exp(-||psi(x) - psi(x')||^2)`.
pub fn neural_kernel(hp: &GpHyperparameters, x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(feature_kernel(&hp.feature_net.forward(x)?, &hp.feature_net.forward(y)?))
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gradients with respect to the mean-net and feature-net parameters.
pub type NetGrads = (Vec<f64>, Vec<f64>);

/// Negative log marginal likelihood of one task and, if requested, its
/// gradients with respect to the mean-net and feature-net parameters, each
/// multiplied by `weight`.
pub fn task_nll(
    mean_net: &Mlp,
    feature_net: &Mlp,
    noise_var: f64,
    value_scale: f64,
    task: &TaskRecord,
    weight: f64,
    with_grad: bool,
) -> Result<(f64, Option<NetGrads>)> {
    let t = task.len();
    let mean_caches: Vec<ForwardCache> =
        task.inputs.iter().map(|x| mean_net.forward_cached(x)).collect::<Result<_>>()?;
    let feat_caches: Vec<ForwardCache> =
        task.inputs.iter().map(|x| feature_net.forward_cached(x)).collect::<Result<_>>()?;
    let psi: Vec<&[f64]> = feat_caches.iter().map(|c| c.output()).collect();
    let mut k = DMatrix::zeros(t, t);
    for i in 0..t {
        for j in 0..i {
            let v = feature_kernel(psi[i], psi[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] = 1.0 + noise_var;
    }
    let chol = cholesky_with_jitter(&k)?;
    let r = DVector::from_iterator(t, (0..t).map(|i| task.values[i] / value_scale - mean_caches[i].output()[0]));
    let lambda = chol.solve(&r);
    let nll = 0.5 * r.dot(&lambda) + 0.5 * chol.ln_det() + 0.5 * t as f64 * LN_2PI;
    if !with_grad {
        return Ok((nll, None));
    }
    let mut g_mean = vec![0.0; mean_net.n_params()];
    let mut g_feat = vec![0.0; feature_net.n_params()];
    for i in 0..t {
        mean_net.accumulate_gradient(&mean_caches[i], &[-weight * lambda[i]], &mut g_mean)?;
    }
    // dL/dK = weight/2 (K^-1 - lambda lambda^T)
    let kinv = chol.inverse();
    let dim = feature_net.output_dim();
    for i in 0..t {
        let mut up = vec![0.0; dim];
        for j in 0..t {
            if i == j {
                continue;
            }
            let g = 0.5 * weight * (kinv[(i, j)] - lambda[i] * lambda[j]);
            // Both (i, j) and (j, i) entries depend on psi_i.
            let c = 2.0 * g * -2.0 * k[(i, j)];
            for d in 0..dim {
                up[d] += c * (psi[i][d] - psi[j][d]);
            }
        }
        feature_net.accumulate_gradient(&feat_caches[i], &up, &mut g_feat)?;
    }
    Ok((nll, Some((g_mean, g_feat))))
}

/// `(1/N) sum_n (1/T_n) NLL_n`.
pub fn meta_nll(hp: &GpHyperparameters, data: &MetaDataset) -> Result<f64> {
    data.validate()?;
    let n = data.len() as f64;
    let parts = data
        .tasks
        .par_iter()
        .map(|task| {
            task_nll(&hp.mean_net, &hp.feature_net, hp.noise_var, hp.value_scale, task, 1.0, false)
                .map(|(v, _)| v / task.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.iter().sum::<f64>() / n)
}

/// Loss and gradient over the flat parameter vector (mean net first).
pub fn meta_nll_grad(hp: &GpHyperparameters, data: &MetaDataset) -> Result<(f64, Vec<f64>)> {
    data.validate()?;
    let n = data.len() as f64;
    let parts = data
        .tasks
        .par_iter()
        .map(|task| {
            let w = 1.0 / (n * task.len() as f64);
            task_nll(&hp.mean_net, &hp.feature_net, hp.noise_var, hp.value_scale, task, w, true)
                .map(|(v, g)| (v * w, g.expect("gradient requested")))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = hp.mean_net.n_params();
    let mut grad = vec![0.0; hp.n_params()];
    let mut loss = 0.0;
    for (v, (gm, gf)) in parts {
        loss += v;
        for (a, b) in grad[..m].iter_mut().zip(&gm) {
            *a += b;
        }
        for (a, b) in grad[m..].iter_mut().zip(&gf) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone)]
pub struct MetaTrainOutput<P> {
    pub params: P,
    /// Loss before each update, then the final loss.
    pub losses: Vec<f64>,
}

/// Plain full-batch gradient descent.
pub fn meta_train(
    data: &MetaDataset,
    init: &GpHyperparameters,
    beta: f64,
    steps: usize,
) -> Result<MetaTrainOutput<GpHyperparameters>> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {beta}")));
    }
    let mut hp = init.clone();
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        let (loss, grad) = meta_nll_grad(&hp, data)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        losses.push(loss);
        let mut p = hp.flat_params();
        for (pi, gi) in p.iter_mut().zip(&grad) {
            *pi -= beta * gi;
        }
        hp.set_flat_params(&p)?;
    }
    let last = meta_nll(&hp, data)?;
    if !last.is_finite() {
        return Err(Error::NonFiniteLoss { step: steps });
    }
    losses.push(last);
    Ok(MetaTrainOutput { params: hp, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn task(inputs: Vec<Vec<f64>>, values: Vec<f64>) -> TaskRecord {
        let t = values.len();
        TaskRecord { arms: (0..t).collect(), inputs, values, probs: vec![1.0; t], arm_rewards: None, context: None }
    }

    #[test]
    fn scalar_closed_form() {
        // Mean net outputting exactly the observation via its bias; kernel is 1.
        let mean_net = Mlp::from_params(&[1, 1], Activation::Tanh, vec![0.0, 0.7]).unwrap();
        let feature_net = Mlp::zeros(&[1, 1], Activation::Tanh).unwrap();
        let hp = GpHyperparameters { mean_net, feature_net, noise_var: 0.0, value_scale: 1.0 };
        let data = MetaDataset { tasks: vec![task(vec![vec![0.3]], vec![0.7])] };
        let v = meta_nll(&hp, &data).unwrap();
        assert!((v - 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn duplicating_tasks_keeps_loss() {
        let hp = GpHyperparameters::init(2, &[4], 3, 1e-3, 1.0, &mut rng_from_seed(4)).unwrap();
        let a = task(vec![vec![0.1, 0.2], vec![0.5, 0.9]], vec![0.3, -0.1]);
        let b = task(vec![vec![0.7, 0.7], vec![0.0, 0.4], vec![0.9, 0.1]], vec![1.0, 0.2, 0.5]);
        let one = MetaDataset { tasks: vec![a.clone(), b.clone()] };
        let two = MetaDataset { tasks: vec![a.clone(), b.clone(), a, b] };
        let (x, y) = (meta_nll(&hp, &one).unwrap(), meta_nll(&hp, &two).unwrap());
        assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn zero_steps_returns_init() {
        let hp = GpHyperparameters::init(2, &[4], 3, 1e-3, 1.0, &mut rng_from_seed(4)).unwrap();
        let data = MetaDataset { tasks: vec![task(vec![vec![0.1, 0.2]], vec![0.3])] };
        let out = meta_train(&data, &hp, 0.1, 0).unwrap();
        assert_eq!(out.params, hp);
        assert_eq!(out.losses.len(), 1);
    }

    #[test]
    fn empty_dataset_rejected() {
        let hp = GpHyperparameters::init(2, &[4], 3, 1e-3, 1.0, &mut rng_from_seed(4)).unwrap();
        assert!(meta_nll(&hp, &MetaDataset::default()).is_err());
    }
}
