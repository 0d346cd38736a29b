//! `salseg`: synthetic data, saliency filtering, cross-validated training,
//! evaluation, paired comparison and reports.

mod commands;
mod config;
mod error;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::EXIT_VALIDATION;

#[derive(Debug, Parser)]
#[command(name = "salseg", version, about = "Saliency-attention U-Net segmentation pipeline")]
struct Cli {
    /// TOML file with defaults for any flag; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic image/mask/saliency dataset.
    Synth(SynthArgs),
    /// Score saliency maps and list the ones kept by the confidence filter.
    Filter(FilterArgs),
    /// Train one model per fold and variant.
    Train(TrainArgs),
    /// Run every fold checkpoint on its test fold and write metric tables.
    Evaluate(EvaluateArgs),
    /// Paired Wilcoxon signed-rank tests between two per-image CSVs.
    Compare(CompareArgs),
    /// Render per-image panels and a summary document for a run.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of samples [default: 200].
    #[arg(long)]
    pub count: Option<usize>,
    /// Image side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Proportions of satisfactory,moderate,low,poor saliency maps.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub mix: Option<Vec<f64>>,
    /// Generator seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct FilterFlags {
    /// Saliency binarization level.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Rule 1 cumulative-intensity ratio [default: 2].
    #[arg(long)]
    pub a1: Option<f64>,
    /// Rule 2 cumulative-intensity ratio [default: 3].
    #[arg(long)]
    pub a2: Option<f64>,
    /// Rule 2 mean-intensity gap [default: 0.2].
    #[arg(long)]
    pub a3: Option<f64>,
    /// Rule 3 mean-intensity level [default: 0.55].
    #[arg(long)]
    pub a4: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Dataset root with images/, masks/ and saliency/.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Where kept_ids.txt and confidence_report.csv go (default: the
    /// dataset root).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub params: FilterFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root with images/, masks/ and saliency/.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Restrict training to the ids listed in this file (one per line).
    #[arg(long)]
    pub ids: Option<PathBuf>,
    /// unet, unet-sa or unet-sa-c; repeat or comma-separate for several.
    #[arg(long = "variant", value_delimiter = ',', num_args = 1..)]
    pub variants: Vec<String>,
    /// Network input side (multiple of 16).
    #[arg(long)]
    pub size: Option<usize>,
    /// Number of cross-validation folds [default: 5].
    #[arg(long)]
    pub folds: Option<usize>,
    /// Seed of the fold assignment and validation split [default: 0].
    #[arg(long)]
    pub fold_seed: Option<u64>,
    /// Encoder filter counts for the five levels.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub filters: Option<Vec<usize>>,
    /// Channels inside each attention block [default: 128].
    #[arg(long)]
    pub attention_channels: Option<usize>,
    /// Adam learning rate [default: 1e-4].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Mini-batch size [default: 4].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Epochs without validation improvement before stopping [default: 20].
    #[arg(long)]
    pub patience: Option<usize>,
    /// Upper bound on training epochs [default: 500].
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Dice loss smoothing.
    #[arg(long)]
    pub smoothing: Option<f64>,
    /// Training seed (shuffling and initialization).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue a run, skipping completed folds.
    #[arg(long)]
    pub resume: bool,
    /// Stop after training this many folds in this invocation.
    #[arg(long)]
    pub stop_after: Option<usize>,
    #[command(flatten)]
    pub params: FilterFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset root (default: the one recorded in the manifest).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Inference batch size.
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Per-image CSV of the first model.
    pub a: PathBuf,
    /// Per-image CSV of the second model.
    pub b: PathBuf,
    /// Output CSV (default: comparison_<a>_vs_<b>.csv next to the first
    /// input).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset root (default: the one recorded in the manifest).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .try_init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging(cli.verbose);
    let result = config::FileConfig::load_opt(cli.config.as_deref()).and_then(|file| {
        let config_path = cli.config.clone();
        match cli.command {
            Command::Synth(a) => commands::synth(&a, &file),
            Command::Filter(a) => commands::filter(&a, &file),
            Command::Train(a) => commands::train(&a, &file, config_path),
            Command::Evaluate(a) => commands::evaluate(&a),
            Command::Compare(a) => commands::compare(&a),
            Command::Report(a) => report::report(&a),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("salseg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
