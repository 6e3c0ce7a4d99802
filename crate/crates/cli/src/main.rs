//! `ctc-adapt`: data generation, base training, finetuning, stopping
//! estimation, evaluation and reporting.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod config;
mod plot;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Environment variable that overrides `--workers`.
const WORKERS_ENV: &str = "CTC_ADAPT_WORKERS";

#[derive(Parser, Debug)]
#[command(name = "ctc-adapt", version, about = "Writer adaptation experiments for CTC line recognizers")]
struct Cli {
    /// Worker threads for parallel jobs (CTC_ADAPT_WORKERS wins when set).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic handwriting dataset.
    GenData(GenDataArgs),
    /// Train a base recognizer from scratch.
    TrainBase(TrainBaseArgs),
    /// Finetune a base checkpoint to target writers.
    Finetune(FinetuneArgs),
    /// Pick a stopping iteration from recorded curves.
    EstimateStop(EstimateStopArgs),
    /// Character error rate of a checkpoint on dataset lines.
    Evaluate(EvaluateArgs),
    /// Tables and SVG plots from finetune or experiment outputs.
    Report(ReportArgs),
    /// Dataset, base model and finetuning in one go.
    Experiment(ExperimentArgs),
    /// Print a preset configuration as TOML.
    ShowConfig(ShowConfigArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Base (training) writers.
    #[arg(long, default_value_t = 20)]
    pub writers: usize,
    /// Training lines per base writer.
    #[arg(long, default_value_t = 200)]
    pub lines_per_writer: usize,
    /// Held-out test lines per base writer.
    #[arg(long, default_value_t = 0)]
    pub test_lines: usize,
    /// Upper end of the base writers' divergence range.
    #[arg(long, default_value_t = 0.4)]
    pub divergence: f64,
    /// High-divergence target writers.
    #[arg(long, default_value_t = 0)]
    pub targets: usize,
    /// Divergence of the target writers.
    #[arg(long, default_value_t = 1.0)]
    pub target_divergence: f64,
    /// Text corpus, one line per line; random strings when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainBaseArgs {
    /// Experiment config (TOML); the preset is used when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Dataset directory; generated from the config when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<u64>,
    /// Augmentation combo, e.g. NONE or B1C1G1M1.
    #[arg(long)]
    pub aug: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Target writer ids; all target writers when absent.
    #[arg(long, value_delimiter = ',')]
    pub writer: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
    pub clusters: Vec<usize>,
    /// Iteration budget per cluster; standard budgets when absent.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Vec<u64>,
    #[arg(long, default_value_t = 3)]
    pub runs: usize,
    #[arg(long, default_value_t = 4)]
    pub folds: usize,
    /// Augmentation combos to compare.
    #[arg(long, value_delimiter = ',', default_value = "NONE")]
    pub aug: Vec<String>,
    /// L, O, A, M, X or S.
    #[arg(long, default_value = "X")]
    pub estimator: String,
    #[arg(long, default_value_t = 1.5)]
    pub factor: f64,
    /// Fixed ratio table for S, e.g. paper-S3.
    #[arg(long)]
    pub ratio_preset: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EstimateStopArgs {
    /// Finetuning curve of the run to stop.
    #[arg(long)]
    pub curves: Option<PathBuf>,
    /// Cross-validation fold curves.
    #[arg(long, value_delimiter = ',')]
    pub folds: Vec<PathBuf>,
    /// Curves of other writers, for S.
    #[arg(long, value_delimiter = ',')]
    pub writer_curves: Vec<PathBuf>,
    #[arg(long, default_value = "X")]
    pub estimator: String,
    #[arg(long, default_value_t = 1.5)]
    pub factor: f64,
    #[arg(long)]
    pub ratio_preset: Option<String>,
    /// Cluster size, for ratio tables; read from the curves when absent.
    #[arg(long)]
    pub cluster: Option<usize>,
    /// Iteration budget; read from the curves when absent.
    #[arg(long)]
    pub budget: Option<u64>,
    /// Writer the estimate is for; read from the curves when absent.
    #[arg(long)]
    pub writer: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train, test or adaptation.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub writer: Option<u64>,
    /// Per-line results as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Plot kinds: combo, cluster, curves, writer.
    #[arg(long, value_delimiter = ',', default_value = "combo,cluster,curves,writer")]
    pub plot: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Shorthand for the desk-tiny preset.
    #[arg(long, conflicts_with = "config")]
    pub tiny: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ShowConfigArgs {
    #[arg(long, default_value = "desk")]
    pub preset: String,
}

/// A refusal caused by the invocation rather than by a failure while running.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn workers(flag: Option<usize>) -> Result<Option<usize>, UsageError> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(UsageError(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(flag.filter(|&n| n > 0)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp_secs().init();

    let result = workers(cli.workers).map_err(anyhow::Error::from).and_then(|n| {
        if let Some(n) = n {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
        }
        match cli.command {
            Command::GenData(a) => commands::gen_data(&a),
            Command::TrainBase(a) => commands::train_base(&a),
            Command::Finetune(a) => commands::finetune(&a),
            Command::EstimateStop(a) => commands::estimate_stop(&a),
            Command::Evaluate(a) => commands::evaluate(&a),
            Command::Report(a) => commands::report(&a),
            Command::Experiment(a) => commands::experiment(&a),
            Command::ShowConfig(a) => commands::show_config(&a),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
