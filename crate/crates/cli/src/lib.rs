//! Command-line pipeline over the `hardneg` library.
//!
//! Exit codes: 0 on success, 1 for invalid invocations or inputs, 2 when a
//! run fails after its inputs were accepted.

mod commands;
pub mod curves;
pub mod manifest;

use std::ffi::OsString;
use std::fmt::Display;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use curves::export_curves;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Invalid { context: String, source: hardneg::Error },
    #[error("{context}: {source}")]
    Runtime { context: String, source: hardneg::Error },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("output directory {0} is in use by another run (delete its .lock file if stale)")]
    Locked(PathBuf),
    #[error("gradient check failed: {0}")]
    GradCheckFailed(String),
}

impl CliError {
    pub fn invalid(context: impl Display, e: impl Into<hardneg::Error>) -> Self {
        CliError::Invalid {
            context: context.to_string(),
            source: e.into(),
        }
    }

    pub fn runtime(context: impl Display, e: impl Into<hardneg::Error>) -> Self {
        CliError::Runtime {
            context: context.to_string(),
            source: e.into(),
        }
    }

    /// Training errors that reject the inputs count as validation failures.
    pub fn train(context: impl Display, e: hardneg::trainer::TrainError) -> Self {
        use hardneg::trainer::TrainError as T;
        match e {
            T::Config(_)
            | T::EmptyData(_)
            | T::BatchTooLarge { .. }
            | T::ShapeMismatch { .. }
            | T::NegativeCount { .. }
            | T::NotInCorpus(..)
            | T::InvalidWeights(_) => CliError::invalid(context, e),
            _ => CliError::runtime(context, e),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Invalid { .. } => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hardneg", version, about = "Contrastive embedding training with dynamic hard-negative mining")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every pipeline stage.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Output directory; nothing is written outside it.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config (training config; synthetic-data config for `synth`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory holding the standard input files.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Keep the initially installed negatives for the whole run.
    #[arg(long)]
    pub static_negatives: bool,
}

/// Explicit paths that take precedence over files found under `--data`.
#[derive(Debug, Clone, Default, Args)]
pub struct DataFiles {
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub retrieval: Option<PathBuf>,
    #[arg(long)]
    pub sts: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus, pairs, retrieval, STS and classification sets.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_queries: Option<usize>,
        #[arg(long)]
        n_clusters: Option<usize>,
        #[arg(long)]
        per_cluster: Option<usize>,
        #[arg(long)]
        n_sts: Option<usize>,
        #[arg(long)]
        noise_fraction: Option<f64>,
    },
    /// Drop pairs scoring below the threshold and write a report.
    Filter {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        files: DataFiles,
        #[arg(long, default_value_t = 0.4)]
        threshold: f64,
    },
    /// In-batch InfoNCE pretraining from a fresh encoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        files: DataFiles,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Install the first window of hard negatives for every retrieval query.
    MineInit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        files: DataFiles,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// CBB fine-tuning with dynamic hard-negative mining.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        files: DataFiles,
        #[command(flatten)]
        overrides: TrainOverrides,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Baseline fine-tuning that updates on one randomly chosen task per step.
    FinetuneSequential {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        files: DataFiles,
        #[command(flatten)]
        overrides: TrainOverrides,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// recall@k at every matryoshka dim and STS Spearman.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        files: DataFiles,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Score and loss curves as CSV.
    ExportCurves {
        #[arg(long)]
        out: PathBuf,
        /// metrics.csv of the CBB run.
        #[arg(long)]
        metrics: PathBuf,
        /// mining_ledger.csv of the same run.
        #[arg(long)]
        ledger: Option<PathBuf>,
        /// metrics.csv of a sequential baseline run.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Check analytic gradients of every objective against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = hardneg::gradcheck::DEFAULT_STEP)]
        step: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Filter { .. } => "filter",
            Command::Pretrain { .. } => "pretrain",
            Command::MineInit { .. } => "mine-init",
            Command::Finetune { .. } => "finetune",
            Command::FinetuneSequential { .. } => "finetune-sequential",
            Command::Eval { .. } => "eval",
            Command::ExportCurves { .. } => "export-curves",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let name = cli.command.name();
    match commands::dispatch(cli.command, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {name}: {e}");
            e.exit_code()
        }
    }
}
