use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use olpc_core::harness::{
    full_scale, meta_train_only, run_experiment, scenario, sweep, test_landscape, write_manifest, write_sweep_csv,
    ExperimentSpec, OptimizerKind, SweepAxis, THREADS_ENV,
};
use olpc_core::{Error, Result};

#[derive(Parser)]
#[command(name = "olpc", version, about = "Meta-learned BO and bandit search for uplink OLPC parameters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dump the objective over the grid for one held-out configuration.
    Landscape {
        #[command(flatten)]
        spec: SpecArgs,
        /// Held-out configuration index.
        #[arg(long, default_value_t = 0)]
        config: usize,
        /// CSI dataset index.
        #[arg(long, default_value_t = 0)]
        csi_dataset: usize,
    },
    /// Run one experiment and write traces, summaries and a manifest.
    Run {
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Fraction-of-oracle at a checkpoint round as one axis varies.
    Sweep {
        #[command(flatten)]
        spec: SpecArgs,
        /// n-meta-tasks or per-task-evals.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long)]
        checkpoint: usize,
    },
    /// Meta-train the GP prior (or its contextual mapping) and save it.
    MetaTrainBo {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        contextual: bool,
    },
    /// Meta-train the bandit policy (or its contextual mapping) and save it.
    MetaTrainMab {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        contextual: bool,
    },
    /// Exhaustive-search optimum of every held-out configuration and CSI dataset.
    Oracle {
        #[command(flatten)]
        spec: SpecArgs,
    },
}

#[derive(Args)]
struct SpecArgs {
    /// Preset: fig3, fig5, fig6, fig7, reduced or smoke.
    #[arg(long, default_value = "fig3")]
    scenario: String,
    /// Comma-separated optimizers (bo, mab, meta-bo, meta-mab, ctx-meta-bo, ctx-meta-mab, oracle).
    #[arg(long, value_delimiter = ',')]
    optimizer: Vec<OptimizerKind>,
    #[arg(long, alias = "tasks")]
    n_meta_tasks: Option<usize>,
    #[arg(long, alias = "tn")]
    per_task_evals: Option<usize>,
    /// Meta-training steps for every meta model.
    #[arg(long)]
    steps: Option<usize>,
    /// Meta-training step size for every meta model.
    #[arg(long, visible_aliases = ["beta", "eta"])]
    stepsize: Option<f64>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    n_test_configs: Option<usize>,
    #[arg(long)]
    n_test_seeds: Option<usize>,
    #[arg(long)]
    n_csi_datasets: Option<usize>,
    #[arg(long)]
    n_csi_samples: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Full-scale CSI sampling: 100 samples per dataset, 100 datasets.
    #[arg(long)]
    full: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl SpecArgs {
    fn resolve(&self) -> Result<ExperimentSpec> {
        let mut s = scenario(&self.scenario)?;
        if self.full {
            s = full_scale(s);
        }
        if !self.optimizer.is_empty() {
            s.optimizers = self.optimizer.clone();
        }
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut s.n_meta_tasks, self.n_meta_tasks);
        set(&mut s.per_task_evals, self.per_task_evals);
        set(&mut s.t_max, self.t_max);
        set(&mut s.n_test_configs, self.n_test_configs);
        set(&mut s.n_test_seeds, self.n_test_seeds);
        set(&mut s.n_csi_datasets, self.n_csi_datasets);
        set(&mut s.n_csi_samples, self.n_csi_samples);
        if let Some(v) = self.steps {
            s.meta.bo_steps = v;
            s.meta.mab_steps = v;
            s.meta.ctx_bo_steps = v;
            s.meta.ctx_mab_steps = v;
        }
        if let Some(v) = self.stepsize {
            s.meta.bo_stepsize = v;
            s.meta.mab_stepsize = v;
            s.meta.ctx_bo_stepsize = v;
            s.meta.ctx_mab_stepsize = v;
        }
        if let Some(v) = self.noise_sigma {
            s.noise_sigma = v;
        }
        if let Some(v) = self.seed {
            s.master_seed = v;
        }
        s.validate()?;
        Ok(s)
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn init_pool() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.parse().map_err(|_| Error::Parse(format!("{THREADS_ENV}={v:?} is not a count")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn meta_train_cmd(args: &SpecArgs, kind: OptimizerKind) -> Result<()> {
    let mut spec = args.resolve()?;
    spec.optimizers = vec![kind];
    let (data, models) = meta_train_only(&spec)?;
    data.save(&args.out.join("meta_data"))?;
    models.save(&args.out)?;
    write_manifest(&spec, &args.out.join("manifest.json"))
}

fn run(cli: Cli) -> Result<()> {
    init_pool()?;
    match cli.command {
        Command::Landscape { spec, config, csi_dataset } => {
            let s = spec.resolve()?;
            let (cfg, landscape) = test_landscape(&s, config, csi_dataset)?;
            landscape.write_csv(create(&spec.out, "landscape.csv")?)?;
            cfg.save(&spec.out.join("configuration.txt"))?;
            write_manifest(&s, &spec.out.join("manifest.json"))
        }
        Command::Run { spec } => run_experiment(&spec.resolve()?)?.write_all(&spec.out),
        Command::Sweep { spec, axis, values, checkpoint } => {
            let s = spec.resolve()?;
            let rows = sweep(&s, axis, &values, checkpoint)?;
            write_sweep_csv(&rows, create(&spec.out, "sweep.csv")?)?;
            write_manifest(&s, &spec.out.join("manifest.json"))
        }
        Command::MetaTrainBo { spec, contextual } => {
            let kind = if contextual { OptimizerKind::CtxMetaBo } else { OptimizerKind::MetaBo };
            meta_train_cmd(&spec, kind)
        }
        Command::MetaTrainMab { spec, contextual } => {
            let kind = if contextual { OptimizerKind::CtxMetaMab } else { OptimizerKind::MetaMab };
            meta_train_cmd(&spec, kind)
        }
        Command::Oracle { spec } => {
            let mut s = spec.resolve()?;
            s.optimizers = vec![OptimizerKind::Oracle];
            let result = run_experiment(&s)?;
            result.write_oracles(create(&spec.out, "oracle.csv")?)?;
            write_manifest(&result.manifest(), &spec.out.join("manifest.json"))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
