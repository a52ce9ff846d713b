//! Command-line front end: data generation, training, evaluation, sweeps and
//! the ablation lattice.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tase::Mode;

use crate::commands::{Axis, EvalSource};
use crate::config::{ExperimentConfig, FeatureSource, Preset};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "tase", version, about = "Temperature-adaptive contrastive learning on long-tailed data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML file overriding preset keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base preset; defaults to `desk`.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a long-tailed training set and balanced test / pool siblings.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model into a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score frozen features on the six benchmarks.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Run directory with `checkpoint.bin`.
        #[arg(long, conflicts_with = "embeddings", required_unless_present = "embeddings", requires = "data")]
        run: Option<PathBuf>,
        /// Embedding dump with `.test` and `.pool` siblings.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        features: Option<FeatureSource>,
    },
    /// Sensitivity sweep over one of K, B, F, S.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Dataset file; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        features: Option<FeatureSource>,
        #[arg(long)]
        parallel: bool,
    },
    /// Run all four modes per seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        features: Option<FeatureSource>,
        #[arg(long)]
        parallel: bool,
    },
}

fn resolve(common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref(), common.preset)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate { common, out } => {
            let mut cfg = resolve(&common)?;
            if let Some(seed) = common.seed {
                cfg.data_seed = seed;
            }
            commands::generate(&cfg, &out)?;
        }
        Command::Train {
            common,
            data,
            out,
            mode,
            resume,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            commands::train(&cfg, &data, &out, resume.as_deref())?;
        }
        Command::Eval {
            common,
            run,
            embeddings,
            data,
            out,
            features,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(f) = features {
                cfg.features = f;
            }
            let source = match (&run, &embeddings, &data) {
                (Some(dir), _, Some(data)) => EvalSource::Run { dir, data },
                (None, Some(path), _) => EvalSource::Embeddings(path),
                _ => return Err(CliError::Config("eval needs --run with --data, or --embeddings".into())),
            };
            commands::eval(&cfg, source, &out)?;
        }
        Command::Sweep {
            common,
            axis,
            values,
            seeds,
            data,
            out,
            features,
            parallel,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(f) = features {
                cfg.features = f;
            }
            let seeds = seeds.or(common.seed.map(|s| vec![s])).unwrap_or_else(|| cfg.seeds.clone());
            commands::sweep(&cfg, axis, &values, &seeds, data.as_deref(), &out, parallel)?;
        }
        Command::Ablate {
            common,
            seeds,
            data,
            out,
            features,
            parallel,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(f) = features {
                cfg.features = f;
            }
            let seeds = seeds.or(common.seed.map(|s| vec![s])).unwrap_or_else(|| cfg.seeds.clone());
            commands::ablate(&cfg, &seeds, data.as_deref(), &out, parallel)?;
        }
    }
    Ok(())
}
