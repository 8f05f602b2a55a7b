//! Command-line driver: dataset generation, the three training phases,
//! evaluation and the ablation sweeps.
//!
//! Every output lives under `--out` in a fixed layout: `data/` (sequences
//! and manifest), `ckpt/` (checkpoints), `reports/` (loss curves, metrics,
//! sweep tables) and `maps/` (error maps). Each command also writes the
//! fully resolved configuration next to its outputs.

mod config;
mod evaluate;
mod generate;
mod pipeline;
mod sweep;
mod training;

pub use config::{
    sequence_seed, DataConfig, DrOverrides, EvalConfig, ExperimentConfig, Kind, ModelConfig, Scale, SweOverrides,
    SweepConfig, LAMBDA_GRID, SEED_ENV,
};
pub use pipeline::{load_splits, Layout, Prepared};
pub use sweep::Axis;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::dataset::DatasetError;
use crate::metrics::MetricsError;
use crate::model::ModelError;
use crate::sim::SimError;
use crate::tensor::TensorError;
use crate::train::TrainError;

/// Exit status for configuration and usage errors.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for numerical failures (solver blow-up, divergence).
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) => EXIT_NUMERIC,
            _ => EXIT_CONFIG,
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Unstable { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => t.into(),
            e => CliError::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged(_) => CliError::Numeric(e.to_string()),
            TrainError::Tensor(t) => t.into(),
            TrainError::Model(m) => m.into(),
            e => CliError::Config(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "pstmae", version, about = "Masked spatiotemporal autoencoder for irregular PDE sequences")]
pub struct Cli {
    /// JSON experiment configuration layered over the scale preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Preset for grid size, dataset size and batch size.
    #[arg(long, global = true, value_enum, default_value_t = Scale::Desk)]
    pub scale: Scale,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate sequences and write them with a manifest to `<out>/data`.
    Generate {
        #[arg(long, value_enum)]
        kind: Option<Kind>,
        #[arg(long)]
        out: PathBuf,
        /// Reject solver parameters outside the reference sampling ranges.
        #[arg(long)]
        strict: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Pre-train the convolutional autoencoder.
    TrainCae(TrainArgs),
    /// Train the masked transformer on the frozen autoencoder.
    TrainPstmae(TrainArgs),
    /// Train the latent LSTM baseline on the frozen autoencoder.
    TrainBaseline(TrainArgs),
    /// Score a checkpoint on one split and write a metrics report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Option<String>,
        /// Output root; defaults to the directory above the checkpoint's.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write absolute-error maps of the forecast steps here.
        #[arg(long)]
        error_maps: Option<PathBuf>,
        /// Hidden input steps per evaluation window.
        #[arg(long)]
        missing: Option<usize>,
    },
    /// Train and evaluate across one ablation axis.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Autoencoder to reuse; trained into `<out>/ckpt` when absent.
        #[arg(long)]
        cae: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory; defaults to `<out>/data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Training-state checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total epochs for this phase, overriding the configuration.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Frozen autoencoder; defaults to `<out>/ckpt/cae.ckpt`.
    #[arg(long)]
    pub cae: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), cli.scale)?;
    match cli.command {
        Command::Generate {
            kind,
            out,
            strict,
            jobs,
        } => {
            let mut cfg = cfg;
            if let Some(k) = kind {
                cfg.data.kind = k;
            }
            generate::run(&cfg, &out, strict, jobs)
        }
        Command::TrainCae(a) => training::train_cae_cmd(&cfg, &a),
        Command::TrainPstmae(a) => training::train_pstmae_cmd(&cfg, &a),
        Command::TrainBaseline(a) => training::train_baseline_cmd(&cfg, &a),
        Command::Evaluate {
            checkpoint,
            split,
            out,
            data,
            error_maps,
            missing,
        } => {
            let mut cfg = cfg;
            if let Some(s) = split {
                cfg.eval.split = s;
            }
            if missing.is_some() {
                cfg.eval.missing = missing;
            }
            cfg.validate()?;
            evaluate::run(&cfg, &checkpoint, out.as_deref(), data.as_deref(), error_maps.as_deref())
        }
        Command::Sweep {
            axis,
            out,
            data,
            cae,
            jobs,
        } => sweep::run(&cfg, axis, &out, data.as_deref(), cae.as_deref(), jobs),
    }
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
