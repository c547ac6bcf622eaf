//! Interference graphs, the in-degree cosine kernel between them and the
//! low-rank map from a graph to model parameters.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit::{backprop_features, task_mab_terms, BanditPolicyParams};
use crate::error::{Error, Result};
use crate::meta_bo::{task_nll, GpHyperparameters, MetaDataset, MetaTrainOutput};
use crate::sim::Configuration;

pub const DEFAULT_EDGE_THRESHOLD: f64 = 1.8;
pub const DEFAULT_RANK: usize = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub cell: usize,
    pub ue: usize,
    pub serving_distance_m: f64,
}

/// One node per UE link. Edge `i -> j` means UE `i` is close to the BS serving `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferenceGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<(usize, usize)>,
}

/// Edge `i -> j` iff `d(UE i, BS of j) / d(UE j, BS of j) < threshold`.
pub fn build_graph(config: &Configuration, threshold: f64) -> Result<InterferenceGraph> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be positive, got {threshold}")));
    }
    config.validate()?;
    let nu = config.n_ues_per_cell;
    let nodes: Vec<GraphNode> = (0..config.n_cells)
        .flat_map(|c| {
            (0..nu).map(move |u| GraphNode { cell: c, ue: u, serving_distance_m: config.distances_serving[c][u] })
        })
        .collect();
    let mut edges = Vec::new();
    for (i, a) in nodes.iter().enumerate() {
        for (j, b) in nodes.iter().enumerate() {
            if i == j {
                continue;
            }
            let d_ij = config.distances_cross[a.cell][a.ue][b.cell];
            if d_ij / b.serving_distance_m < threshold {
                edges.push((i, j));
            }
        }
    }
    Ok(InterferenceGraph { nodes, edges })
}

impl InterferenceGraph {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.nodes.len()];
        for (_, j) in &self.edges {
            d[*j] += 1;
        }
        d
    }

    /// Relabels nodes: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut nodes = self.nodes.clone();
        for (i, n) in self.nodes.iter().enumerate() {
            nodes[perm[i]] = n.clone();
        }
        let edges = self.edges.iter().map(|(i, j)| (perm[*i], perm[*j])).collect();
        Self { nodes, edges }
    }

    /// `node <id> <cell> <ue> <serving_distance>` lines, then `edge <i> <j>` lines.
    pub fn to_edge_list(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let _ = writeln!(s, "node {} {} {} {:?}", i, n.cell, n.ue, n.serving_distance_m);
        }
        for (i, j) in &self.edges {
            let _ = writeln!(s, "edge {i} {j}");
        }
        s
    }

    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Parse(format!("graph line {}: {line:?}", lineno + 1));
            match parts.first() {
                None => continue,
                Some(&"#") => continue,
                Some(&"node") if parts.len() == 5 => {
                    let id: usize = parts[1].parse().map_err(|_| bad())?;
                    if id != nodes.len() {
                        return Err(bad());
                    }
                    nodes.push(GraphNode {
                        cell: parts[2].parse().map_err(|_| bad())?,
                        ue: parts[3].parse().map_err(|_| bad())?,
                        serving_distance_m: parts[4].parse().map_err(|_| bad())?,
                    });
                }
                Some(&"edge") if parts.len() == 3 => {
                    let i: usize = parts[1].parse().map_err(|_| bad())?;
                    let j: usize = parts[2].parse().map_err(|_| bad())?;
                    edges.push((i, j));
                }
                _ => return Err(bad()),
            }
        }
        if edges.iter().any(|(i, j)| *i >= nodes.len() || *j >= nodes.len() || i == j) {
            return Err(Error::Parse("edge refers to a missing node or is a self-edge".into()));
        }
        Ok(Self { nodes, edges })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_edge_list())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_edge_list(&std::fs::read_to_string(path)?)
    }
}

/// Entry `i - 1` counts nodes of in-degree exactly `i`, for `i = 1..=max_dim`.
pub fn feature_vector(graph: &InterferenceGraph, max_dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; max_dim];
    for d in graph.in_degrees() {
        if d >= 1 && d <= max_dim {
            v[d - 1] += 1.0;
        }
    }
    v
}

/// Cosine similarity; 0 if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Cosine kernel between in-degree feature vectors of a common dimension.
pub fn context_kernel(g: &InterferenceGraph, h: &InterferenceGraph, max_dim: usize) -> f64 {
    cosine(&feature_vector(g, max_dim), &feature_vector(h, max_dim))
}

/// Common feature dimension: largest node count minus one.
pub fn common_max_dim<'a, I: IntoIterator<Item = &'a InterferenceGraph>>(graphs: I) -> usize {
    graphs.into_iter().map(|g| g.n_nodes()).max().unwrap_or(1).saturating_sub(1).max(1)
}

/// `theta(c) = V1 V2^T kappa(c)`, `kappa(c)_n = context_kernel(c, anchor_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextMapping {
    pub v1: DMatrix<f64>,
    pub v2: DMatrix<f64>,
    pub anchors: Vec<InterferenceGraph>,
    pub max_dim: usize,
}

impl ContextMapping {
    pub fn new(v1: DMatrix<f64>, v2: DMatrix<f64>, anchors: Vec<InterferenceGraph>, max_dim: usize) -> Result<Self> {
        let m = Self { v1, v2, anchors, max_dim };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchors.is_empty() {
            return Err(Error::InvalidArgument("context mapping needs at least one anchor".into()));
        }
        if self.v2.nrows() != self.anchors.len() {
            return Err(Error::DimensionMismatch { expected: self.anchors.len(), got: self.v2.nrows() });
        }
        if self.v1.ncols() != self.v2.ncols() {
            return Err(Error::DimensionMismatch { expected: self.v1.ncols(), got: self.v2.ncols() });
        }
        let r = self.rank();
        if r == 0 || r >= self.v1.nrows().min(self.anchors.len()) {
            return Err(Error::InvalidArgument(format!(
                "rank {r} must satisfy 0 < r < min(L = {}, N = {})",
                self.v1.nrows(),
                self.anchors.len()
            )));
        }
        Ok(())
    }

    /// Entries uniform in `[-1, 1] / sqrt(r)`.
    pub fn init<R: Rng + ?Sized>(
        n_params: usize,
        rank: usize,
        anchors: Vec<InterferenceGraph>,
        max_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let s = 1.0 / (rank as f64).sqrt();
        let v1 = DMatrix::from_fn(n_params, rank, |_, _| rng.random_range(-1.0..=1.0) * s);
        let v2 = DMatrix::from_fn(anchors.len(), rank, |_, _| rng.random_range(-1.0..=1.0) * s);
        Self::new(v1, v2, anchors, max_dim)
    }

    pub fn rank(&self) -> usize {
        self.v1.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.v1.nrows()
    }

    pub fn kappa(&self, graph: &InterferenceGraph) -> DVector<f64> {
        let f = feature_vector(graph, self.max_dim);
        DVector::from_iterator(
            self.anchors.len(),
            self.anchors.iter().map(|a| cosine(&f, &feature_vector(a, self.max_dim))),
        )
    }

    pub fn map_kappa(&self, kappa: &DVector<f64>) -> Result<DVector<f64>> {
        if kappa.len() != self.anchors.len() {
            return Err(Error::DimensionMismatch { expected: self.anchors.len(), got: kappa.len() });
        }
        Ok(&self.v1 * (self.v2.transpose() * kappa))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("v1.txt"), matrix_to_text(&self.v1))?;
        std::fs::write(dir.join("v2.txt"), matrix_to_text(&self.v2))?;
        let mut manifest = format!("max_dim={}\nanchors={}\n", self.max_dim, self.anchors.len());
        for (i, a) in self.anchors.iter().enumerate() {
            let name = format!("anchor_{i:03}.graph");
            a.save(&dir.join(&name))?;
            let _ = writeln!(manifest, "anchor={name}");
        }
        std::fs::write(dir.join("anchors.txt"), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let v1 = matrix_from_text(&std::fs::read_to_string(dir.join("v1.txt"))?)?;
        let v2 = matrix_from_text(&std::fs::read_to_string(dir.join("v2.txt"))?)?;
        let manifest = std::fs::read_to_string(dir.join("anchors.txt"))?;
        let mut max_dim = None;
        let mut anchors = Vec::new();
        for line in manifest.lines() {
            match line.split_once('=') {
                Some(("max_dim", v)) => {
                    max_dim = Some(v.trim().parse().map_err(|e| Error::Parse(format!("max_dim: {e}")))?)
                }
                Some(("anchor", name)) => anchors.push(InterferenceGraph::load(&dir.join(name.trim()))?),
                _ => {}
            }
        }
        Self::new(v1, v2, anchors, max_dim.ok_or_else(|| Error::Parse("anchors.txt: missing max_dim".into()))?)
    }
}

/// First line `rows cols`, then one whitespace-separated row per line.
fn matrix_to_text(m: &DMatrix<f64>) -> String {
    let mut s = format!("{} {}\n", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:?}", m[(i, j)])).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

fn matrix_from_text(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty matrix file".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|v| v.parse().map_err(|e| Error::Parse(format!("matrix header: {e}"))))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(Error::Parse("matrix header must be `rows cols`".into()));
    }
    let values: Vec<f64> = lines
        .flat_map(|l| l.split_whitespace())
        .map(|v| v.parse().map_err(|e| Error::Parse(format!("matrix entry: {e}"))))
        .collect::<Result<_>>()?;
    if values.len() != dims[0] * dims[1] {
        return Err(Error::DimensionMismatch { expected: dims[0] * dims[1], got: values.len() });
    }
    Ok(DMatrix::from_row_slice(dims[0], dims[1], &values))
}

/// Kernel vectors of every task's context against the anchors.
pub fn task_kappas(mapping: &ContextMapping, data: &MetaDataset) -> Result<Vec<DVector<f64>>> {
    data.tasks
        .iter()
        .map(|t| {
            t.context
                .as_ref()
                .map(|g| mapping.kappa(g))
                .ok_or_else(|| Error::InvalidArgument("task has no context graph".into()))
        })
        .collect()
}

/// Chains per-task parameter gradients `g_n` (at `theta_n = V1 z_n`,
/// `z_n = V2^T kappa_n`) into gradients of `V1` and `V2`.
fn chain_mapping(
    mapping: &ContextMapping,
    kappas: &[DVector<f64>],
    grads: &[DVector<f64>],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut g1 = DMatrix::zeros(mapping.v1.nrows(), mapping.v1.ncols());
    let mut g2 = DMatrix::zeros(mapping.v2.nrows(), mapping.v2.ncols());
    for (kappa, g) in kappas.iter().zip(grads) {
        let z = mapping.v2.transpose() * kappa;
        g1 += g * z.transpose();
        let w = mapping.v1.transpose() * g;
        g2 += kappa * w.transpose();
    }
    (g1, g2)
}

/// Loss of contextual meta-BO and, optionally, gradients for `(V1, V2)`.
/// Gradients with respect to `(V1, V2)`.
pub type FactorGrads = (DMatrix<f64>, DMatrix<f64>);

/// `template` fixes the network shapes, noise variance and value scale.
pub fn contextual_bo_loss_grad(
    mapping: &ContextMapping,
    template: &GpHyperparameters,
    data: &MetaDataset,
    kappas: &[DVector<f64>],
    with_grad: bool,
) -> Result<(f64, Option<FactorGrads>)> {
    data.validate()?;
    if mapping.n_params() != template.n_params() {
        return Err(Error::DimensionMismatch { expected: template.n_params(), got: mapping.n_params() });
    }
    let n = data.len() as f64;
    let parts = data
        .tasks
        .par_iter()
        .zip(kappas.par_iter())
        .map(|(task, kappa)| {
            let theta = mapping.map_kappa(kappa)?;
            let mut hp = template.clone();
            hp.set_flat_params(theta.as_slice())?;
            let w = 1.0 / (n * task.len() as f64);
            let (v, g) = task_nll(&hp.mean_net, &hp.feature_net, hp.noise_var, hp.value_scale, task, w, with_grad)?;
            let g = g.map(|(gm, gf)| DVector::from_iterator(gm.len() + gf.len(), gm.into_iter().chain(gf)));
            Ok((v * w, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = parts.iter().map(|(v, _)| v).sum();
    if !with_grad {
        return Ok((loss, None));
    }
    let grads: Vec<DVector<f64>> = parts.into_iter().map(|(_, g)| g.expect("gradient requested")).collect();
    Ok((loss, Some(chain_mapping(mapping, kappas, &grads))))
}

/// Policy parameters for one context: kernel-net weights and `omega` (last
/// coordinate, clamped to `[0, 1]`).
pub fn bandit_params_from_theta(template: &BanditPolicyParams, theta: &[f64]) -> Result<BanditPolicyParams> {
    let mut p = template.clone();
    p.set_flat_params(theta)?;
    Ok(p)
}

/// Loss of contextual meta-MAB and, optionally, gradients for `(V1, V2)`.
pub fn contextual_mab_loss_grad(
    mapping: &ContextMapping,
    template: &BanditPolicyParams,
    data: &MetaDataset,
    inputs: &[Vec<f64>],
    kappas: &[DVector<f64>],
    with_grad: bool,
) -> Result<(f64, Option<FactorGrads>)> {
    data.validate()?;
    if mapping.n_params() != template.n_params() {
        return Err(Error::DimensionMismatch { expected: template.n_params(), got: mapping.n_params() });
    }
    let n = data.len() as f64;
    let parts = data
        .tasks
        .par_iter()
        .zip(kappas.par_iter())
        .map(|(task, kappa)| {
            let theta = mapping.map_kappa(kappa)?;
            let params = bandit_params_from_theta(template, theta.as_slice())?;
            let feats = params.arm_features(inputs)?;
            let terms = task_mab_terms(&feats, params.omega, params.temperature, task, with_grad)?;
            if !with_grad {
                return Ok((terms.loss / n, None));
            }
            let m = params.kernel_net.n_params();
            let mut g = vec![0.0; m + 1];
            backprop_features(&params.kernel_net, inputs, &terms.feature_grads, &mut g[..m])?;
            let raw_omega = theta[m];
            g[m] = if (0.0..=1.0).contains(&raw_omega) { terms.d_omega } else { 0.0 };
            let g = DVector::from_iterator(m + 1, g.into_iter().map(|v| v / n));
            Ok((terms.loss / n, Some(g)))
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = parts.iter().map(|(v, _)| v).sum();
    if !with_grad {
        return Ok((loss, None));
    }
    let grads: Vec<DVector<f64>> = parts.into_iter().map(|(_, g)| g.expect("gradient requested")).collect();
    Ok((loss, Some(chain_mapping(mapping, kappas, &grads))))
}

fn descend<F>(init: &ContextMapping, stepsize: f64, steps: usize, mut f: F) -> Result<MetaTrainOutput<ContextMapping>>
where
    F: FnMut(&ContextMapping, bool) -> Result<(f64, Option<(DMatrix<f64>, DMatrix<f64>)>)>,
{
    if !(stepsize > 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {stepsize}")));
    }
    init.validate()?;
    let mut mapping = init.clone();
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        let (loss, g) = f(&mapping, true)?;
        let (g1, g2) = g.expect("gradient requested");
        if !loss.is_finite() || g1.iter().chain(g2.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        losses.push(loss);
        mapping.v1 -= g1 * stepsize;
        mapping.v2 -= g2 * stepsize;
    }
    let (last, _) = f(&mapping, false)?;
    if !last.is_finite() {
        return Err(Error::NonFiniteLoss { step: steps });
    }
    losses.push(last);
    Ok(MetaTrainOutput { params: mapping, losses })
}

/// Gradient descent on `(V1, V2)` for the contextual GP-prior loss.
pub fn contextual_meta_train_bo(
    data: &MetaDataset,
    template: &GpHyperparameters,
    init: &ContextMapping,
    stepsize: f64,
    steps: usize,
) -> Result<MetaTrainOutput<ContextMapping>> {
    let kappas = task_kappas(init, data)?;
    descend(init, stepsize, steps, |m, g| contextual_bo_loss_grad(m, template, data, &kappas, g))
}

/// Gradient descent on `(V1, V2)` for the contextual bandit loss.
pub fn contextual_meta_train_mab(
    data: &MetaDataset,
    inputs: &[Vec<f64>],
    template: &BanditPolicyParams,
    init: &ContextMapping,
    stepsize: f64,
    steps: usize,
) -> Result<MetaTrainOutput<ContextMapping>> {
    let kappas = task_kappas(init, data)?;
    descend(init, stepsize, steps, |m, g| contextual_mab_loss_grad(m, template, data, inputs, &kappas, g))
}

/// GP prior for a context.
pub fn map_context_bo(
    mapping: &ContextMapping,
    template: &GpHyperparameters,
    graph: &InterferenceGraph,
) -> Result<GpHyperparameters> {
    let theta = map_context(mapping, graph)?;
    let mut hp = template.clone();
    hp.set_flat_params(theta.as_slice())?;
    Ok(hp)
}

/// Bandit policy for a context.
pub fn map_context_mab(
    mapping: &ContextMapping,
    template: &BanditPolicyParams,
    graph: &InterferenceGraph,
) -> Result<BanditPolicyParams> {
    let theta = map_context(mapping, graph)?;
    bandit_params_from_theta(template, theta.as_slice())
}

/// `V1 V2^T kappa(graph)`.
pub fn map_context(mapping: &ContextMapping, graph: &InterferenceGraph) -> Result<DVector<f64>> {
    mapping.map_kappa(&mapping.kappa(graph))
}
