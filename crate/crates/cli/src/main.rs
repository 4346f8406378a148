//! `maskforge` command-line tool.
//!
//! Exit codes: 0 on success, 1 when a command fails at runtime, 2 for usage
//! errors. Failures print a single JSON line on stderr.

mod commands;
mod panel;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "maskforge", version, about = "Manufacture tamper masks from original/tampered image pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Discover image pairs under a directory and write a manifest.
    Pair(PairArgs),
    /// Generate synthetic tampered pairs with ground-truth masks.
    Synth(SynthArgs),
    /// Train a model and save the best checkpoint.
    Train(TrainArgs),
    /// Predict masks for the pairs of a manifest.
    Generate(GenerateArgs),
    /// Check masks against the white-area validity rule.
    Filter(FilterArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Render comparison panels: original, tampered, baseline, model.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct PairArgs {
    #[arg(long)]
    pub root: PathBuf,
    /// Output manifest (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "default")]
    pub layout: String,
    /// Reassign splits at random with these fractions.
    #[arg(long)]
    pub val_frac: Option<f64>,
    #[arg(long)]
    pub test_frac: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    /// Side length, or `HxW`.
    #[arg(long, default_value = "64")]
    pub size: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// JPEG quality applied to the tampered image; 100 disables it.
    #[arg(long, default_value_t = 100)]
    pub jpeg_quality: u8,
    #[arg(long, default_value_t = 0.0)]
    pub blur_sigma: f64,
    /// Pairs placed in the validation split (taken after the training ones).
    #[arg(long, default_value_t = 0)]
    pub val: usize,
    /// Pairs placed in the test split (the last ones).
    #[arg(long, default_value_t = 0)]
    pub test: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch JSONL log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Split to process, or `all`.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Query scale factor; masks are resized back to the native size.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Also write the subtraction baseline as `<id>_baseline.png`.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    /// Directory of mask PNGs.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output JSONL report.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// File-name suffix of the predictions to score.
    #[arg(long, default_value = "_mask")]
    pub suffix: String,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding `<id>_mask.png` and optionally `<id>_baseline.png`.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Evaluation reports whose per-image scores go into the panel index.
    #[arg(long)]
    pub report: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pair(a) => commands::pair(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Filter(a) => commands::filter(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Plot(a) => commands::plot(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": commands::error_kind(&e), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
