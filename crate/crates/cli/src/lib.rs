//! Command-line surface over `mbbr-core`: dataset synthesis, pretraining,
//! few-shot fine-tuning, evaluation, ablation sweeps and attention export.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::Sweep;
use config::{ExperimentConfig, Overrides, Precision};
pub use error::{exit, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "mbbr", version, about = "Masked bounding box reconstruction experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON experiment config; flags win over its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Top-level seed; stage seeds are derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic scene benchmark as JSONL.
    Synth,
    /// Pretrain the encoder and write a checkpoint plus training log.
    Pretrain {
        #[arg(long)]
        epochs: Option<usize>,
        /// Scene JSONL to use instead of the configured data source.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the few-shot predicate classifier.
    Finetune {
        /// Pretrained model checkpoint; required for encoded representations.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Samples per predicate; defaults to the largest configured k.
        #[arg(long)]
        k_shot: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Few-shot evaluation over every configured k and seed.
    Eval {
        /// Pretrained checkpoints: none, one shared, or one per seed.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Mask-ratio, loss-kind and feature-set sweeps.
    Ablate {
        /// Sweeps to run; all by default.
        #[arg(long, value_enum)]
        sweep: Vec<Sweep>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Dump per-layer, per-head attention weights for each scene.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
    },
}

/// Reads the config file (or defaults) and applies the flags.
pub fn resolve_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let base = match &cli.common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut o = Overrides {
        seed: cli.common.seed,
        out: cli.common.out.clone(),
        precision: cli.common.precision,
        ..Overrides::default()
    };
    match &cli.command {
        Command::Pretrain { epochs, data } => {
            o.epochs = *epochs;
            o.data = data.clone();
        }
        Command::Finetune { data, .. } | Command::Eval { data, .. } | Command::Ablate { data, .. } => {
            o.data = data.clone();
        }
        Command::Synth | Command::ExportAttention { .. } => {}
    }
    base.resolve(&o)
}

/// Runs the command; returns the manifest path.
pub fn run(cli: &Cli) -> CliResult<PathBuf> {
    let cfg = resolve_config(cli)?;
    match cfg.precision {
        Precision::F64 => dispatch::<f64>(cli, &cfg),
        Precision::F32 => dispatch::<f32>(cli, &cfg),
    }
}

fn dispatch<T: mbbr_core::Scalar>(cli: &Cli, cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    match &cli.command {
        Command::Synth => commands::cmd_synth(cfg),
        Command::Pretrain { .. } => commands::cmd_pretrain::<T>(cfg),
        Command::Finetune { checkpoint, k_shot, .. } => {
            let k = match k_shot.or_else(|| cfg.k_shots.iter().copied().max()) {
                Some(k) if k > 0 => k,
                _ => return Err(CliError::Config("finetune needs a positive --k-shot or k_shots entry".into())),
            };
            commands::cmd_finetune::<T>(cfg, checkpoint.as_deref(), k)
        }
        Command::Eval { checkpoint, .. } => commands::cmd_eval::<T>(cfg, checkpoint),
        Command::Ablate { sweep, .. } => {
            let sweeps = if sweep.is_empty() { Sweep::ALL.to_vec() } else { sweep.clone() };
            commands::cmd_ablate::<T>(cfg, &sweeps)
        }
        Command::ExportAttention { checkpoint, scenes } => commands::cmd_export_attention::<T>(cfg, checkpoint, scenes),
    }
}
