use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;
use vcell::config::RunConfig;
use vcell::pipeline;
use vcell::transport::{JitVariant, Pooling, PriorMode};
use vcell::{Error, Result};

/// Set-level perturbation response modelling on condition-sharded single-cell data.
#[derive(Debug, Parser)]
#[command(name = "vcell", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; every field has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; also seeds the synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory: the dataset for synth/prepare, the run directory otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory (overrides `data.dir`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, global = true, value_enum)]
    pooling: Option<PoolingArg>,
    #[arg(long, global = true, value_enum)]
    prior: Option<PriorArg>,
    /// Euler steps used by displacement-predicting variants at generation time.
    #[arg(long, global = true)]
    steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    Xx,
    Xv,
    Vx,
    Vv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PoolingArg {
    Mean,
    Token,
    Seed,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PriorArg {
    Control,
    Gaussmix,
    Maskctrl,
    Maskmix,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset with planted effects.
    Synth,
    /// Normalize raw counts and optionally keep the most variable genes.
    Prepare {
        /// Dataset to read.
        #[arg(long)]
        input: PathBuf,
        /// Number of highly variable genes to keep (overrides `hvg`).
        #[arg(long)]
        hvg: Option<usize>,
    },
    /// Train a model and write the run directory.
    Train,
    /// Predict perturbed populations from matched controls.
    Generate {
        /// Condition as "cell_type|perturbation|batch"; repeatable. Defaults to the held-out split.
        #[arg(long = "condition")]
        conditions: Vec<String>,
    },
    /// Score predictions against observed cells.
    Eval {
        /// Predicted shards (default: `<run>/pred`).
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Observed shards (default: the dataset directory).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Merge the reports of several runs into one table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the table here instead of standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.synth.seed = seed;
        }
        if let Some(dir) = &self.data {
            cfg.data.dir = dir.clone();
        }
        if let Some(v) = self.variant {
            cfg.transport.variant = match v {
                VariantArg::Xx => JitVariant::Xx,
                VariantArg::Xv => JitVariant::Xv,
                VariantArg::Vx => JitVariant::Vx,
                VariantArg::Vv => JitVariant::Vv,
            };
        }
        if let Some(p) = self.pooling {
            cfg.transport.pooling = match p {
                PoolingArg::Mean => Pooling::Mean,
                PoolingArg::Token => Pooling::Token,
                PoolingArg::Seed => Pooling::Seed,
            };
        }
        if let Some(p) = self.prior {
            cfg.transport.prior = prior_from_flag(p, cfg.transport.prior);
        }
        if let Some(s) = self.steps {
            cfg.transport.steps = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Keeps the configured mix/rate when the flag names the same kind of prior.
fn prior_from_flag(flag: PriorArg, current: PriorMode) -> PriorMode {
    const MIX: f64 = 0.5;
    const RATE: f64 = 0.1;
    let (mix, rate) = match current {
        PriorMode::Control => (MIX, RATE),
        PriorMode::GaussianMix { mix } => (mix, RATE),
        PriorMode::MaskedControl { rate } => (MIX, rate),
        PriorMode::MaskedGaussianMix { mix, rate } => (mix, rate),
    };
    match flag {
        PriorArg::Control => PriorMode::Control,
        PriorArg::Gaussmix => PriorMode::GaussianMix { mix },
        PriorArg::Maskctrl => PriorMode::MaskedControl { rate },
        PriorArg::Maskmix => PriorMode::MaskedGaussianMix { mix, rate },
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = cli.common.resolve()?;
    let out = cli.common.out.clone();
    match cli.command {
        Command::Synth => {
            let dir = out.unwrap_or_else(|| cfg.data.dir.clone());
            pipeline::cmd_synth(&cfg, &dir)?;
        }
        Command::Prepare { input, hvg } => {
            if hvg.is_some() {
                cfg.hvg = hvg;
            }
            let dir = out.unwrap_or_else(|| cfg.data.dir.clone());
            if same_dir(&dir, &input) {
                return Err(Error::Argument("prepare cannot overwrite its input".into()));
            }
            pipeline::cmd_prepare(&cfg, &input, &dir)?;
        }
        Command::Train => {
            if let Some(dir) = out {
                cfg.out = dir;
            }
            let record = pipeline::cmd_train(&cfg)?;
            println!("{}", record.checkpoint.display());
        }
        Command::Generate { conditions } => {
            if let Some(dir) = out {
                cfg.out = dir;
            }
            if conditions.is_empty() {
                pipeline::cmd_generate(&cfg, None)?;
            } else {
                let store = vcell::datastore::Store::open(&cfg.data.dir)?;
                let parsed = conditions
                    .iter()
                    .map(|c| pipeline::parse_condition(&store.manifest, c))
                    .collect::<Result<Vec<_>>>()?;
                pipeline::cmd_generate(&cfg, Some(&parsed))?;
            }
        }
        Command::Eval { pred, truth } => {
            if let Some(dir) = out {
                cfg.out = dir;
            }
            let pred = pred.unwrap_or_else(|| cfg.out.join(pipeline::PRED_DIR));
            let truth = truth.unwrap_or_else(|| cfg.data.dir.clone());
            let report = pipeline::cmd_eval(&cfg, &pred, &truth, &cfg.out)?;
            print!("{}", report.to_csv()?);
        }
        Command::Report { runs, output } => {
            let table = pipeline::cmd_report(&runs, output.as_deref())?;
            if output.is_none() {
                print!("{table}");
            }
        }
    }
    Ok(())
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
