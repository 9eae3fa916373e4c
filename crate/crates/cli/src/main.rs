//! `ms2d`: phantom generation, training, experiment matrices, rank
//! statistics and scan-catalogue dumps.
//!
//! Set `MS2D_THREADS` to bound the worker pool.

mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "ms2d", version, about = "Multi-scan state-space segmentation toolkit")]
pub struct Cli {
    /// Root directory for every output of the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Seed for every random choice (data, init, shuffling).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic phantom dataset.
    GenData(GenDataArgs),
    /// Train one experiment and evaluate it on the test split.
    Train(TrainArgs),
    /// Train a list of experiments under identical settings.
    Matrix(MatrixArgs),
    /// Friedman test, mean ranks and deltas for a score table.
    Analyze(AnalyzeArgs),
    /// Print all twelve scan orders for a grid.
    ScanDump(ScanDumpArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Key-value file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub cases: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub lesions_min: Option<usize>,
    #[arg(long)]
    pub lesions_max: Option<usize>,
    #[arg(long)]
    pub eccentricity: Option<f64>,
    /// Texture oscillation direction in radians, [0, pi).
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub anisotropy: Option<f64>,
    #[arg(long)]
    pub contrast: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelTrainArgs {
    /// Key-value file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub img_size: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub state_dim: Option<usize>,
    /// Output channels: 1 for binary masks, K for K-class labels.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// bce_dice or ce_mdice.
    #[arg(long)]
    pub loss: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub experiment: usize,
    /// Average test metrics per image instead of over all pixels.
    #[arg(long)]
    pub per_slice: bool,
    #[command(flatten)]
    pub common: ModelTrainArgs,
}

#[derive(Args, Debug)]
pub struct MatrixArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma list with ranges, e.g. `1,3,19` or `1-21` or `all`.
    #[arg(long, default_value = "all")]
    pub experiments: String,
    /// Experiments trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Dataset label used in scores.csv.
    #[arg(long, default_value = "phantom")]
    pub label: String,
    #[command(flatten)]
    pub common: ModelTrainArgs,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Built-in score table (only `table2`).
    #[arg(long, conflicts_with = "scores")]
    pub fixture: Option<String>,
    /// Long-format score files (dataset,experiment,dice[,miou]).
    #[arg(long, num_args = 1.., required_unless_present = "fixture")]
    pub scores: Vec<PathBuf>,
    /// Tie handling: average, first or last. The fixture defaults to last.
    #[arg(long)]
    pub ties: Option<String>,
    /// Apply the tie-corrected Friedman denominator.
    #[arg(long)]
    pub tie_correction: bool,
}

#[derive(Args, Debug)]
pub struct ScanDumpArgs {
    /// Grid as HxW, e.g. 3x3.
    #[arg(long)]
    pub grid: String,
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("MS2D_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("MS2D_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| commands::dispatch(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
