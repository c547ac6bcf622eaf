//! Experiment orchestration: meta-train configurations and histories,
//! meta-training, evaluation on held-out configurations and CSV output.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit::{meta_mab_train, run_mab, BanditPolicyParams, DEFAULT_OMEGA};
use crate::context::{
    build_graph, common_max_dim, contextual_meta_train_bo, contextual_meta_train_mab, map_context_bo, map_context_mab,
    ContextMapping, InterferenceGraph, DEFAULT_EDGE_THRESHOLD, DEFAULT_RANK,
};
use crate::error::{Error, Result};
use crate::gp::{run_bo, ArmTable, BoConfig, EiParams, RbfPrior, ValueScaling, DEFAULT_RBF_LENGTHSCALE};
use crate::meta_bo::{meta_train, GpHyperparameters, MetaDataset, TaskRecord, NOISE_FLOOR};
use crate::objective::{Landscape, LandscapeObjective, OlpcGrid};
use crate::rng::{derive_seed, stage_rng, stage_seed, Stage};
use crate::sim::{draw_csi, sample_configuration, ConfigSpec, Configuration};
use crate::trace::Trace;

/// Environment variable holding the worker count.
pub const THREADS_ENV: &str = "OLPC_THREADS";

/// Topology/CSI stream indices of held-out configurations start here.
const TEST_INDEX_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Bo,
    Mab,
    MetaBo,
    MetaMab,
    CtxMetaBo,
    CtxMetaMab,
    Oracle,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 7] = [
        OptimizerKind::Bo,
        OptimizerKind::Mab,
        OptimizerKind::MetaBo,
        OptimizerKind::MetaMab,
        OptimizerKind::CtxMetaBo,
        OptimizerKind::CtxMetaMab,
        OptimizerKind::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Bo => "bo",
            OptimizerKind::Mab => "mab",
            OptimizerKind::MetaBo => "meta-bo",
            OptimizerKind::MetaMab => "meta-mab",
            OptimizerKind::CtxMetaBo => "ctx-meta-bo",
            OptimizerKind::CtxMetaMab => "ctx-meta-mab",
            OptimizerKind::Oracle => "oracle",
        }
    }

    fn needs_meta_data(self) -> bool {
        matches!(
            self,
            OptimizerKind::MetaBo | OptimizerKind::MetaMab | OptimizerKind::CtxMetaBo | OptimizerKind::CtxMetaMab
        )
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::Parse(format!("unknown optimizer {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    NMetaTasks,
    PerTaskEvals,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n-meta-tasks" | "n_meta_tasks" => Ok(SweepAxis::NMetaTasks),
            "per-task-evals" | "per_task_evals" => Ok(SweepAxis::PerTaskEvals),
            _ => Err(Error::Parse(format!("unknown sweep axis {s:?}"))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::NMetaTasks => "n_meta_tasks",
            SweepAxis::PerTaskEvals => "per_task_evals",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Keep every `p0_step`-th P0 value of the table.
    pub p0_step: usize,
    pub shared_across_cells: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { p0_step: 1, shared_across_cells: true }
    }
}

impl GridSpec {
    pub fn build(&self, n_cells: usize) -> Result<OlpcGrid> {
        OlpcGrid::table(n_cells, self.shared_across_cells).subsample_p0(self.p0_step)
    }
}

/// Architectures and optimizer settings for meta-training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaSettings {
    pub gp_hidden: Vec<usize>,
    pub gp_feature_dim: usize,
    /// Added to the scaled observation-noise variance.
    pub gp_noise_var: f64,
    pub bo_stepsize: f64,
    pub bo_steps: usize,
    pub bandit_hidden: Vec<usize>,
    pub bandit_feature_dim: usize,
    pub mab_stepsize: f64,
    pub mab_steps: usize,
    pub rank: usize,
    pub ctx_bo_stepsize: f64,
    pub ctx_bo_steps: usize,
    pub ctx_mab_stepsize: f64,
    pub ctx_mab_steps: usize,
    pub edge_threshold: f64,
}

impl Default for MetaSettings {
    fn default() -> Self {
        Self {
            gp_hidden: vec![32, 32, 32],
            gp_feature_dim: 32,
            gp_noise_var: NOISE_FLOOR,
            bo_stepsize: 2e-3,
            bo_steps: 300,
            bandit_hidden: vec![16, 16],
            bandit_feature_dim: 8,
            mab_stepsize: 0.3,
            mab_steps: 200,
            rank: DEFAULT_RANK,
            ctx_bo_stepsize: 5e-4,
            ctx_bo_steps: 300,
            ctx_mab_stepsize: 0.03,
            ctx_mab_steps: 200,
            edge_threshold: DEFAULT_EDGE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub scenario: String,
    pub optimizers: Vec<OptimizerKind>,
    pub n_meta_tasks: usize,
    pub per_task_evals: usize,
    pub t_max: usize,
    pub n_test_configs: usize,
    /// Runs per held-out configuration; run `s` uses CSI dataset `s % n_csi_datasets`.
    pub n_test_seeds: usize,
    pub n_csi_datasets: usize,
    /// CSI samples per dataset.
    pub n_csi_samples: usize,
    pub master_seed: u64,
    pub config: ConfigSpec,
    pub grid: GridSpec,
    pub noise_sigma: f64,
    pub ei: EiParams,
    pub bo_noise_var: f64,
    pub rbf_lengthscale: f64,
    pub omega: f64,
    /// Softmax temperature of the bandit policy.
    pub temperature: f64,
    pub meta: MetaSettings,
    /// Rounds at which fractions are summarized.
    pub checkpoints: Vec<usize>,
    /// Fraction level for the first-round-reaching summary.
    pub reach_level: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            scenario: "custom".into(),
            optimizers: vec![OptimizerKind::Bo, OptimizerKind::Mab],
            n_meta_tasks: 50,
            per_task_evals: 10,
            t_max: 100,
            n_test_configs: 5,
            n_test_seeds: 10,
            n_csi_datasets: 10,
            n_csi_samples: 10,
            master_seed: 0,
            config: ConfigSpec::default(),
            grid: GridSpec::default(),
            noise_sigma: 0.0,
            ei: EiParams::default(),
            bo_noise_var: 1e-6,
            rbf_lengthscale: DEFAULT_RBF_LENGTHSCALE,
            omega: DEFAULT_OMEGA,
            temperature: 1.0,
            meta: MetaSettings::default(),
            checkpoints: vec![20, 50, 100],
            reach_level: 0.9,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("t_max", self.t_max),
            ("n_test_configs", self.n_test_configs),
            ("n_test_seeds", self.n_test_seeds),
            ("n_csi_datasets", self.n_csi_datasets),
            ("n_csi_samples", self.n_csi_samples),
            ("grid.p0_step", self.grid.p0_step),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if self.optimizers.is_empty() {
            return Err(Error::InvalidArgument("no optimizer selected".into()));
        }
        if self.optimizers.iter().any(|o| o.needs_meta_data()) && (self.n_meta_tasks == 0 || self.per_task_evals == 0) {
            return Err(Error::InvalidArgument(
                "meta optimizers need n_meta_tasks >= 1 and per_task_evals >= 1".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument("noise_sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::InvalidArgument("omega must lie in [0, 1]".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        self.ei.validate()?;
        self.config.validate()
    }

    pub fn grid(&self) -> Result<OlpcGrid> {
        self.grid.build(self.config.n_cells)
    }

    /// Effective rank for `n` anchors: `min(rank, n - 1)`.
    pub fn rank_for(&self, n_anchors: usize) -> usize {
        self.meta.rank.min(n_anchors.saturating_sub(1)).max(1)
    }
}

/// Named presets.
pub fn scenario(name: &str) -> Result<ExperimentSpec> {
    use OptimizerKind::*;
    let base = ExperimentSpec { scenario: name.into(), ..ExperimentSpec::default() };
    let spec = match name {
        "fig3" => ExperimentSpec {
            optimizers: vec![Bo, Mab],
            n_test_configs: 1,
            t_max: 600,
            checkpoints: vec![50, 100, 300, 600],
            ..base
        },
        "fig5" => ExperimentSpec {
            optimizers: vec![Bo, MetaBo, Mab, MetaMab],
            t_max: 600,
            checkpoints: vec![50, 100, 175, 300, 510, 600],
            ..base
        },
        "fig6" => ExperimentSpec {
            optimizers: vec![MetaBo, CtxMetaBo, MetaMab, CtxMetaMab],
            t_max: 50,
            checkpoints: vec![50],
            ..base
        },
        "fig7" => ExperimentSpec {
            optimizers: vec![MetaBo, CtxMetaBo, MetaMab, CtxMetaMab],
            t_max: 20,
            checkpoints: vec![20],
            ..base
        },
        "reduced" => ExperimentSpec {
            optimizers: vec![Bo, Mab],
            n_test_configs: 1,
            t_max: 600,
            n_csi_samples: 20,
            config: ConfigSpec { n_cells: 2, n_ues_per_cell: 3, n_rx: 4, n_tx: 2, ..ConfigSpec::default() },
            grid: GridSpec { p0_step: 4, shared_across_cells: true },
            checkpoints: vec![100, 300, 600],
            reach_level: 0.99,
            ..base
        },
        "smoke" => ExperimentSpec {
            optimizers: vec![Bo, Mab, MetaBo, MetaMab, CtxMetaBo, CtxMetaMab, Oracle],
            n_meta_tasks: 4,
            per_task_evals: 5,
            t_max: 8,
            n_test_configs: 2,
            n_test_seeds: 2,
            n_csi_datasets: 2,
            n_csi_samples: 2,
            config: ConfigSpec { n_cells: 2, n_ues_per_cell: 2, n_rx: 2, n_tx: 1, ..ConfigSpec::default() },
            grid: GridSpec { p0_step: 8, shared_across_cells: true },
            meta: MetaSettings {
                gp_hidden: vec![4],
                gp_feature_dim: 3,
                bo_steps: 3,
                bandit_hidden: vec![4],
                bandit_feature_dim: 2,
                mab_steps: 3,
                rank: 2,
                ctx_bo_steps: 3,
                ctx_mab_steps: 3,
                ..MetaSettings::default()
            },
            checkpoints: vec![4, 8],
            ..base
        },
        _ => return Err(Error::InvalidArgument(format!("unknown scenario {name:?}"))),
    };
    Ok(spec)
}

/// Full-scale sampling: 100 CSI samples per dataset and 100 datasets.
pub fn full_scale(mut spec: ExperimentSpec) -> ExperimentSpec {
    spec.n_csi_samples = 100;
    spec.n_csi_datasets = 100;
    spec
}

/// A meta-train configuration with its objective table.
#[derive(Debug, Clone)]
pub struct TaskEnv {
    pub config: Configuration,
    pub graph: InterferenceGraph,
    pub landscape: Landscape,
}

/// A held-out configuration with one objective table per CSI dataset.
#[derive(Debug, Clone)]
pub struct TestEnv {
    pub config: Configuration,
    pub graph: InterferenceGraph,
    pub landscapes: Vec<Landscape>,
}

fn landscape_for(spec: &ExperimentSpec, config: &Configuration, grid: &OlpcGrid, csi_seed: u64) -> Result<Landscape> {
    let ds = draw_csi(config, spec.n_csi_samples, csi_seed).map_err(|e| e.in_stage("csi", csi_seed))?;
    Landscape::compute(&ds, config, grid).map_err(|e| e.in_stage("landscape", csi_seed))
}

fn sample_config(spec: &ExperimentSpec, index: u64) -> Result<(Configuration, InterferenceGraph)> {
    let seed = stage_seed(spec.master_seed, Stage::Topology, index);
    let config = sample_configuration(&spec.config, seed).map_err(|e| e.in_stage("topology", seed))?;
    let graph = build_graph(&config, spec.meta.edge_threshold).map_err(|e| e.in_stage("context graph", seed))?;
    Ok((config, graph))
}

/// The first `n` meta-train configurations. Prefixes agree across `n`.
pub fn train_envs(spec: &ExperimentSpec, grid: &OlpcGrid, n: usize) -> Result<Vec<TaskEnv>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let (config, graph) = sample_config(spec, i)?;
            let landscape = landscape_for(spec, &config, grid, stage_seed(spec.master_seed, Stage::Csi, i))?;
            Ok(TaskEnv { config, graph, landscape })
        })
        .collect()
}

pub fn test_envs(spec: &ExperimentSpec, grid: &OlpcGrid) -> Result<Vec<TestEnv>> {
    (0..spec.n_test_configs as u64)
        .into_par_iter()
        .map(|j| {
            let idx = TEST_INDEX_BASE + j;
            let (config, graph) = sample_config(spec, idx)?;
            let base = stage_seed(spec.master_seed, Stage::Csi, idx);
            let landscapes = (0..spec.n_csi_datasets as u64)
                .map(|k| landscape_for(spec, &config, grid, derive_seed(base, k)))
                .collect::<Result<_>>()?;
            Ok(TestEnv { config, graph, landscapes })
        })
        .collect()
}

/// Histories of `per_task_evals` uniformly drawn distinct arms per
/// configuration. Draw `i` has probability `1 / (K - i)`.
pub fn meta_dataset(
    spec: &ExperimentSpec,
    grid: &OlpcGrid,
    envs: &[TaskEnv],
    per_task_evals: usize,
) -> Result<MetaDataset> {
    let k = grid.len();
    if per_task_evals == 0 || per_task_evals > k {
        return Err(Error::InvalidArgument(format!("per_task_evals must lie in 1..={k}, got {per_task_evals}")));
    }
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let tasks = envs
        .iter()
        .enumerate()
        .map(|(n, env)| {
            let mut rng = stage_rng(spec.master_seed, Stage::MetaHistory, n as u64);
            let mut order: Vec<usize> = (0..k).collect();
            let (chosen, _) = order.partial_shuffle(&mut rng, per_task_evals);
            let arms = chosen.to_vec();
            let values = arms
                .iter()
                .map(|&a| {
                    let v = env.landscape.values[a];
                    if spec.noise_sigma > 0.0 {
                        v + noise.sample(&mut rng)
                    } else {
                        v
                    }
                })
                .collect();
            Ok(TaskRecord {
                inputs: arms.iter().map(|&a| grid.input(a)).collect::<Result<_>>()?,
                probs: (0..arms.len()).map(|i| 1.0 / (k - i) as f64).collect(),
                arms,
                values,
                arm_rewards: Some(env.landscape.values.clone()),
                context: Some(env.graph.clone()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetaDataset { tasks })
}

/// Meta-learned models and their loss curves.
#[derive(Debug, Clone, Default)]
pub struct TrainedModels {
    pub gp: Option<GpHyperparameters>,
    pub bandit: Option<BanditPolicyParams>,
    pub ctx_gp: Option<(ContextMapping, GpHyperparameters)>,
    pub ctx_bandit: Option<(ContextMapping, BanditPolicyParams)>,
    pub losses: Vec<(OptimizerKind, Vec<f64>)>,
}

pub fn gp_template(spec: &ExperimentSpec, input_dim: usize, data: &MetaDataset) -> Result<GpHyperparameters> {
    let mut rng = stage_rng(spec.master_seed, Stage::Init, 0);
    let scale = data.value_scale();
    // Observation noise in the units the GP sees, plus the floor.
    let noise_var = (spec.noise_sigma / scale).powi(2) + spec.meta.gp_noise_var;
    GpHyperparameters::init(input_dim, &spec.meta.gp_hidden, spec.meta.gp_feature_dim, noise_var, scale, &mut rng)
}

pub fn bandit_template(spec: &ExperimentSpec, grid: &OlpcGrid) -> Result<BanditPolicyParams> {
    let mut rng = stage_rng(spec.master_seed, Stage::Init, 1);
    BanditPolicyParams::init(
        grid.input_dim(),
        &spec.meta.bandit_hidden,
        spec.meta.bandit_feature_dim,
        spec.omega,
        spec.temperature,
        &mut rng,
    )
}

fn context_init(
    spec: &ExperimentSpec,
    n_params: usize,
    data: &MetaDataset,
    max_dim: usize,
    stream: u64,
) -> Result<ContextMapping> {
    let anchors: Vec<InterferenceGraph> = data
        .tasks
        .iter()
        .map(|t| t.context.clone().ok_or_else(|| Error::InvalidArgument("task has no context graph".into())))
        .collect::<Result<_>>()?;
    let rank = spec.rank_for(anchors.len());
    let mut rng = stage_rng(spec.master_seed, Stage::Init, stream);
    ContextMapping::init(n_params, rank, anchors, max_dim, &mut rng)
}

/// Trains whatever `spec.optimizers` needs. `max_dim` is the common graph
/// feature dimension over train and test graphs.
pub fn train_models(
    spec: &ExperimentSpec,
    grid: &OlpcGrid,
    data: &MetaDataset,
    max_dim: usize,
) -> Result<TrainedModels> {
    let inputs = grid.inputs();
    let m = &spec.meta;
    let mut out = TrainedModels::default();
    let wants = |k: OptimizerKind| spec.optimizers.contains(&k);
    if wants(OptimizerKind::MetaBo) {
        let init = gp_template(spec, grid.input_dim(), data)?;
        let r = meta_train(data, &init, m.bo_stepsize, m.bo_steps)
            .map_err(|e| e.in_stage("meta-train bo", spec.master_seed))?;
        out.losses.push((OptimizerKind::MetaBo, r.losses));
        out.gp = Some(r.params);
    }
    if wants(OptimizerKind::MetaMab) {
        let init = bandit_template(spec, grid)?;
        let r = meta_mab_train(data, &inputs, &init, m.mab_stepsize, m.mab_steps)
            .map_err(|e| e.in_stage("meta-train mab", spec.master_seed))?;
        out.losses.push((OptimizerKind::MetaMab, r.losses));
        out.bandit = Some(r.params);
    }
    if wants(OptimizerKind::CtxMetaBo) {
        let template = gp_template(spec, grid.input_dim(), data)?;
        let init = context_init(spec, template.n_params(), data, max_dim, 2)?;
        let r = contextual_meta_train_bo(data, &template, &init, m.ctx_bo_stepsize, m.ctx_bo_steps)
            .map_err(|e| e.in_stage("meta-train ctx bo", spec.master_seed))?;
        out.losses.push((OptimizerKind::CtxMetaBo, r.losses));
        out.ctx_gp = Some((r.params, template));
    }
    if wants(OptimizerKind::CtxMetaMab) {
        let template = bandit_template(spec, grid)?;
        let init = context_init(spec, template.n_params(), data, max_dim, 3)?;
        let r = contextual_meta_train_mab(data, &inputs, &template, &init, m.ctx_mab_stepsize, m.ctx_mab_steps)
            .map_err(|e| e.in_stage("meta-train ctx mab", spec.master_seed))?;
        out.losses.push((OptimizerKind::CtxMetaMab, r.losses));
        out.ctx_bandit = Some((r.params, template));
    }
    Ok(out)
}

/// Meta-trains the models `spec.optimizers` asks for without evaluating them.
pub fn meta_train_only(spec: &ExperimentSpec) -> Result<(MetaDataset, TrainedModels)> {
    spec.validate()?;
    let grid = spec.grid()?;
    let train = train_envs(spec, &grid, spec.n_meta_tasks)?;
    let test_graphs = (0..spec.n_test_configs as u64)
        .map(|j| sample_config(spec, TEST_INDEX_BASE + j).map(|(_, g)| g))
        .collect::<Result<Vec<_>>>()?;
    let max_dim = common_max_dim(train.iter().map(|e| &e.graph).chain(test_graphs.iter()));
    let data = meta_dataset(spec, &grid, &train, spec.per_task_evals)?;
    let models = train_models(spec, &grid, &data, max_dim)?;
    Ok((data, models))
}

/// Objective table of held-out configuration `config`, CSI dataset `csi_dataset`.
pub fn test_landscape(spec: &ExperimentSpec, config: usize, csi_dataset: usize) -> Result<(Configuration, Landscape)> {
    spec.validate()?;
    let grid = spec.grid()?;
    let idx = TEST_INDEX_BASE + config as u64;
    let (cfg, _) = sample_config(spec, idx)?;
    let seed = derive_seed(stage_seed(spec.master_seed, Stage::Csi, idx), csi_dataset as u64);
    let landscape = landscape_for(spec, &cfg, &grid, seed)?;
    Ok((cfg, landscape))
}

impl TrainedModels {
    /// One subdirectory per trained model plus `meta_losses.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        if let Some(hp) = &self.gp {
            hp.save(&dir.join("meta-bo"))?;
        }
        if let Some(p) = &self.bandit {
            p.save(&dir.join("meta-mab"))?;
        }
        if let Some((m, t)) = &self.ctx_gp {
            m.save(&dir.join("ctx-meta-bo").join("mapping"))?;
            t.save(&dir.join("ctx-meta-bo").join("template"))?;
        }
        if let Some((m, t)) = &self.ctx_bandit {
            m.save(&dir.join("ctx-meta-mab").join("mapping"))?;
            t.save(&dir.join("ctx-meta-mab").join("template"))?;
        }
        let mut w = create(dir, "meta_losses.csv")?;
        writeln!(w, "model,step,loss")?;
        for (opt, losses) in &self.losses {
            for (i, l) in losses.iter().enumerate() {
                writeln!(w, "{opt},{i},{l}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub optimizer: OptimizerKind,
    pub config: usize,
    pub seed: usize,
    pub csi_dataset: usize,
    pub trace: Trace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRecord {
    pub config: usize,
    pub csi_dataset: usize,
    pub grid_index: usize,
    pub p0_dbm: f64,
    pub alpha: f64,
    pub kpi: f64,
}

pub fn oracle_records(grid: &OlpcGrid, tests: &[TestEnv]) -> Result<Vec<OracleRecord>> {
    let mut out = Vec::new();
    for (j, t) in tests.iter().enumerate() {
        for (k, l) in t.landscapes.iter().enumerate() {
            let idx = l.oracle_index();
            let p = grid.point(idx)?;
            out.push(OracleRecord {
                config: j,
                csi_dataset: k,
                grid_index: idx,
                p0_dbm: p.p0_dbm[0],
                alpha: p.alpha[0],
                kpi: l.oracle_value(),
            });
        }
    }
    Ok(out)
}

/// Runs every non-oracle optimizer on every (held-out configuration, seed).
pub fn evaluate(
    spec: &ExperimentSpec,
    grid: &OlpcGrid,
    models: &TrainedModels,
    tests: &[TestEnv],
) -> Result<Vec<RunRecord>> {
    let inputs = grid.inputs();
    let dim = grid.input_dim();
    let bo_cfg = |scaling| BoConfig { t_max: spec.t_max, ei: spec.ei, noise_var: spec.bo_noise_var, scaling };
    let rbf_arms = ArmTable::from_prior(&RbfPrior::new(dim, spec.rbf_lengthscale, 0.0), &inputs);
    let rbf_policy = BanditPolicyParams::rbf(dim, spec.rbf_lengthscale, spec.omega, spec.temperature)?;
    let meta_arms = models.gp.as_ref().map(|hp| ArmTable::from_prior(hp, &inputs));
    let missing = |k: OptimizerKind| Error::InvalidArgument(format!("no trained model for {k}"));

    let jobs: Vec<(OptimizerKind, usize, usize)> = spec
        .optimizers
        .iter()
        .filter(|o| **o != OptimizerKind::Oracle)
        .flat_map(|&o| (0..tests.len()).flat_map(move |j| (0..spec.n_test_seeds).map(move |s| (o, j, s))))
        .collect();

    jobs.into_par_iter()
        .map(|(opt, j, s)| {
            let env = &tests[j];
            let k = s % env.landscapes.len();
            let landscape = &env.landscapes[k];
            let base = TEST_INDEX_BASE + j as u64;
            let noise_seed = derive_seed(stage_seed(spec.master_seed, Stage::Noise, base), s as u64);
            let opt_seed = derive_seed(stage_seed(spec.master_seed, Stage::Optimizer, base), s as u64);
            let mut objective = LandscapeObjective::new(landscape, spec.noise_sigma, noise_seed);
            let mut trace = match opt {
                OptimizerKind::Bo => run_bo(&mut objective, &rbf_arms, &bo_cfg(ValueScaling::RunningMax)),
                OptimizerKind::MetaBo => {
                    let hp = models.gp.as_ref().ok_or_else(|| missing(opt))?;
                    let arms = meta_arms.as_ref().expect("built with gp");
                    run_bo(&mut objective, arms, &bo_cfg(ValueScaling::Fixed(hp.value_scale)))
                }
                OptimizerKind::CtxMetaBo => {
                    let (mapping, template) = models.ctx_gp.as_ref().ok_or_else(|| missing(opt))?;
                    let hp = map_context_bo(mapping, template, &env.graph)?;
                    let arms = ArmTable::from_prior(&hp, &inputs);
                    run_bo(&mut objective, &arms, &bo_cfg(ValueScaling::Fixed(hp.value_scale)))
                }
                OptimizerKind::Mab => run_mab(&mut objective, &inputs, &rbf_policy, spec.t_max, opt_seed),
                OptimizerKind::MetaMab => {
                    let p = models.bandit.as_ref().ok_or_else(|| missing(opt))?;
                    run_mab(&mut objective, &inputs, p, spec.t_max, opt_seed)
                }
                OptimizerKind::CtxMetaMab => {
                    let (mapping, template) = models.ctx_bandit.as_ref().ok_or_else(|| missing(opt))?;
                    let p = map_context_mab(mapping, template, &env.graph)?;
                    run_mab(&mut objective, &inputs, &p, spec.t_max, opt_seed)
                }
                OptimizerKind::Oracle => unreachable!("oracle runs are filtered out"),
            }
            .map_err(|e| e.in_stage(format!("{opt} on test config {j}"), opt_seed))?;
            trace.set_oracle(landscape.oracle_value());
            Ok(RunRecord { optimizer: opt, config: j, seed: s, csi_dataset: k, trace })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub n_arms: usize,
    pub max_dim: usize,
    pub runs: Vec<RunRecord>,
    pub oracles: Vec<OracleRecord>,
    pub losses: Vec<(OptimizerKind, Vec<f64>)>,
}

fn needs_meta(spec: &ExperimentSpec) -> bool {
    spec.optimizers.iter().any(|o| o.needs_meta_data())
}

fn run_with_envs(
    spec: &ExperimentSpec,
    grid: &OlpcGrid,
    train: &[TaskEnv],
    tests: &[TestEnv],
) -> Result<ExperimentResult> {
    let max_dim = common_max_dim(train.iter().map(|e| &e.graph).chain(tests.iter().map(|t| &t.graph)));
    let models = if needs_meta(spec) {
        let data = meta_dataset(spec, grid, train, spec.per_task_evals)?;
        train_models(spec, grid, &data, max_dim)?
    } else {
        TrainedModels::default()
    };
    let runs = evaluate(spec, grid, &models, tests)?;
    Ok(ExperimentResult {
        spec: spec.clone(),
        n_arms: grid.len(),
        max_dim,
        runs,
        oracles: oracle_records(grid, tests)?,
        losses: models.losses,
    })
}

/// Full pipeline for one spec.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let grid = spec.grid()?;
    let train = if needs_meta(spec) { train_envs(spec, &grid, spec.n_meta_tasks)? } else { Vec::new() };
    let tests = test_envs(spec, &grid)?;
    run_with_envs(spec, &grid, &train, &tests)
}

/// Median (mean of the middle pair for even counts) of finite values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

impl ExperimentResult {
    pub fn runs_of(&self, opt: OptimizerKind) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(move |r| r.optimizer == opt)
    }

    pub fn fractions_at(&self, opt: OptimizerKind, round: usize) -> Vec<f64> {
        self.runs_of(opt).filter_map(|r| r.trace.fraction_at(round)).collect()
    }

    pub fn median_fraction_at(&self, opt: OptimizerKind, round: usize) -> Option<f64> {
        median(&self.fractions_at(opt, round))
    }

    /// Median first round reaching `level`; runs that never reach it count
    /// as infinitely late.
    pub fn median_first_round(&self, opt: OptimizerKind, level: f64) -> Option<f64> {
        let rounds: Vec<f64> = self
            .runs_of(opt)
            .map(|r| r.trace.first_round_reaching(level).map_or(f64::INFINITY, |v| v as f64))
            .collect();
        median(&rounds).filter(|m| m.is_finite())
    }

    /// Median over runs of the first round reaching `level` for every run of `opt`, `None` for never.
    pub fn first_rounds(&self, opt: OptimizerKind, level: f64) -> Vec<Option<usize>> {
        self.runs_of(opt).map(|r| r.trace.first_round_reaching(level)).collect()
    }

    fn optimizers_run(&self) -> Vec<OptimizerKind> {
        self.spec.optimizers.iter().copied().filter(|o| *o != OptimizerKind::Oracle).collect()
    }

    pub fn write_traces<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "optimizer,config,seed,csi_dataset,round,grid_index,observed_kpi,incumbent_kpi,fraction_of_oracle"
        )?;
        for r in &self.runs {
            for row in &r.trace.rows {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{}",
                    r.optimizer,
                    r.config,
                    r.seed,
                    r.csi_dataset,
                    row.round,
                    row.grid_index,
                    row.observed_kpi,
                    row.incumbent_kpi,
                    row.fraction_of_oracle.map(|f| f.to_string()).unwrap_or_default()
                )?;
            }
        }
        Ok(())
    }

    /// Median and mean fraction per optimizer and round.
    pub fn write_summary<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "optimizer,round,median_fraction,mean_fraction")?;
        for opt in self.optimizers_run() {
            for round in 1..=self.spec.t_max {
                let f = self.fractions_at(opt, round);
                writeln!(w, "{},{},{},{}", opt, round, fmt_opt(median(&f)), fmt_opt(mean(&f)))?;
            }
        }
        Ok(())
    }

    pub fn write_checkpoints<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "optimizer,round,median_fraction,mean_fraction")?;
        for opt in self.optimizers_run() {
            for &round in &self.spec.checkpoints {
                let f = self.fractions_at(opt, round);
                writeln!(w, "{},{},{},{}", opt, round, fmt_opt(median(&f)), fmt_opt(mean(&f)))?;
            }
        }
        Ok(())
    }

    pub fn write_reach<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "optimizer,level,median_first_round,runs_reached,runs")?;
        let level = self.spec.reach_level;
        for opt in self.optimizers_run() {
            let firsts = self.first_rounds(opt, level);
            let reached = firsts.iter().filter(|f| f.is_some()).count();
            let med = self.median_first_round(opt, level).map(|m| m.to_string()).unwrap_or_else(|| "never".into());
            writeln!(w, "{},{},{},{},{}", opt, level, med, reached, firsts.len())?;
        }
        Ok(())
    }

    pub fn write_oracles<W: Write>(&self, w: W) -> Result<()> {
        write_oracle_csv(&self.oracles, w)
    }

    pub fn write_losses<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "model,step,loss")?;
        for (opt, losses) in &self.losses {
            for (i, l) in losses.iter().enumerate() {
                writeln!(w, "{opt},{i},{l}")?;
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            spec: self.spec.clone(),
            n_arms: self.n_arms,
            rank: self.spec.rank_for(self.spec.n_meta_tasks),
            graph_feature_dim: self.max_dim,
            crate_version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    /// Writes every CSV plus `manifest.json` into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_manifest(&self.manifest(), &dir.join("manifest.json"))?;
        self.write_oracles(create(dir, "oracle.csv")?)?;
        if !self.runs.is_empty() {
            self.write_traces(create(dir, "traces.csv")?)?;
            self.write_summary(create(dir, "summary.csv")?)?;
            self.write_checkpoints(create(dir, "checkpoints.csv")?)?;
            self.write_reach(create(dir, "reach.csv")?)?;
        }
        if !self.losses.is_empty() {
            self.write_losses(create(dir, "meta_losses.csv")?)?;
        }
        Ok(())
    }
}

pub fn write_oracle_csv<W: Write>(records: &[OracleRecord], mut w: W) -> Result<()> {
    writeln!(w, "config,csi_dataset,grid_index,p0_dbm,alpha,oracle_kpi")?;
    for o in records {
        writeln!(w, "{},{},{},{},{},{}", o.config, o.csi_dataset, o.grid_index, o.p0_dbm, o.alpha, o.kpi)?;
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Every resolved parameter of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: ExperimentSpec,
    pub n_arms: usize,
    pub rank: usize,
    pub graph_feature_dim: usize,
    pub crate_version: String,
}

pub fn write_manifest<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: usize,
    pub optimizer: OptimizerKind,
    pub checkpoint: usize,
    pub median_fraction: Option<f64>,
    pub mean_fraction: Option<f64>,
}

/// One row per (axis value, optimizer) at `checkpoint`. Configurations and
/// CSI are shared across axis values.
pub fn sweep(spec: &ExperimentSpec, axis: SweepAxis, values: &[usize], checkpoint: usize) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    if checkpoint == 0 {
        return Err(Error::InvalidArgument("checkpoint must be at least 1".into()));
    }
    spec.validate()?;
    let grid = spec.grid()?;
    let max_n = match axis {
        SweepAxis::NMetaTasks => values.iter().copied().max().unwrap_or(0),
        SweepAxis::PerTaskEvals => spec.n_meta_tasks,
    };
    let train = if needs_meta(spec) { train_envs(spec, &grid, max_n)? } else { Vec::new() };
    let tests = test_envs(spec, &grid)?;
    let mut rows = Vec::new();
    for &v in values {
        let mut s = spec.clone();
        match axis {
            SweepAxis::NMetaTasks => s.n_meta_tasks = v,
            SweepAxis::PerTaskEvals => s.per_task_evals = v,
        }
        s.t_max = s.t_max.max(checkpoint);
        s.validate()?;
        let n = if needs_meta(&s) { s.n_meta_tasks } else { 0 };
        let result = run_with_envs(&s, &grid, &train[..n], &tests)?;
        for opt in result.optimizers_run() {
            let f = result.fractions_at(opt, checkpoint);
            rows.push(SweepRow {
                axis,
                value: v,
                optimizer: opt,
                checkpoint,
                median_fraction: median(&f),
                mean_fraction: mean(&f),
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> Result<()> {
    writeln!(w, "axis,value,optimizer,checkpoint,median_fraction,mean_fraction")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.axis,
            r.value,
            r.optimizer,
            r.checkpoint,
            fmt_opt(r.median_fraction),
            fmt_opt(r.mean_fraction)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optimizer_names_round_trip() {
        for k in OptimizerKind::ALL {
            assert_eq!(k.name().parse::<OptimizerKind>().unwrap(), k);
        }
        assert!("vanilla".parse::<OptimizerKind>().is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn rank_clamped_by_anchor_count() {
        let s = ExperimentSpec::default();
        assert_eq!(s.rank_for(50), 14);
        assert_eq!(s.rank_for(10), 9);
    }

    #[test]
    fn all_scenarios_validate() {
        for name in ["fig3", "fig5", "fig6", "fig7", "reduced", "smoke"] {
            scenario(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn reduced_grid_has_232_arms() {
        assert_eq!(scenario("reduced").unwrap().grid().unwrap().len(), 232);
    }
}
