//! Command-line frontend: ingestion, group analysis, synthetic data,
//! training, evaluation and grid search.

// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use lenrank_core::ErrorKind;

mod commands;
pub mod config;
mod grid;
mod manifest;

pub use config::RunConfig;
pub use manifest::Manifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] lenrank_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Usage => EXIT_USAGE,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Numeric => EXIT_NUMERIC,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lenrank", version, about = "Length-debiased ranking from view-time feedback")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true, env = "LENRANK_SEED")]
    pub seed: Option<u64>,
    /// Base directory for relative output paths.
    #[arg(long, global = true, env = "LENRANK_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    /// Worker threads for evaluation; 1 gives single-worker mode.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate and preprocess a dataset, print statistics, optionally split it.
    Ingest(IngestArgs),
    /// Completion-rate curves by video length plus per-group thresholds.
    AnalyzeGroups(AnalyzeArgs),
    /// Generate a synthetic dataset with planted preferences.
    Synthgen(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a held-out set with a checkpoint and write a metric report.
    Evaluate(EvaluateArgs),
    /// Sequential, resumable hyperparameter search.
    Grid(GridArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Interaction log (`user_id,video_id,view_time[,timestamp]`).
    #[arg(long)]
    pub interactions: Option<PathBuf>,
    /// Video table (`video_id,length`).
    #[arg(long)]
    pub videos: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Write train/validation/test splits and the kept videos here.
    #[arg(long)]
    pub split_out: Option<PathBuf>,
    /// Also write the statistics JSON to this file.
    #[arg(long)]
    pub stats_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Completion curve CSV (`length,p50,p75,count`).
    #[arg(long)]
    pub out: PathBuf,
    /// Per-group summary JSON.
    #[arg(long)]
    pub summary_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for interactions.csv, videos.csv and truth.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub videos: Option<usize>,
    #[arg(long)]
    pub interactions: Option<usize>,
    #[arg(long)]
    pub topics: Option<usize>,
    #[arg(long)]
    pub bias: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    /// Validation log for early stopping; without it the last epoch is kept.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Video table; defaults to `data.videos` from the configuration.
    #[arg(long)]
    pub videos: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch history CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Method name (vldrec, t_reg, r_reg, t_rank, r_rank, ips, ips_c, ips_cn, ips_cnsr, caus_e).
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Write the first epoch's training triples to this CSV.
    #[arg(long)]
    pub dump_triples: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Report JSON; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-group CSV.
    #[arg(long)]
    pub groups_csv: Option<PathBuf>,
    /// Per-user CSV.
    #[arg(long)]
    pub users_csv: Option<PathBuf>,
    /// `video_id,category` table enabling category intersection and JSD.
    #[arg(long)]
    pub category_file: Option<PathBuf>,
    /// Drop test rows whose user or video the checkpoint does not know.
    #[arg(long)]
    pub skip_unknown: bool,
    /// Report of a reference method; adds relative improvements.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    #[arg(long)]
    pub videos: Option<PathBuf>,
    /// Directory for trial checkpoints and the grid manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Search an axis over its preset range (learning_rate, dropout, alpha, beta).
    #[arg(long = "preset")]
    pub presets: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub learning_rate: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub dropout: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub alpha: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub beta: Vec<f64>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match cli.threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Usage(e.to_string()))?;
            pool.install(|| commands::dispatch(cli))
        }
        None => commands::dispatch(cli),
    }
}
