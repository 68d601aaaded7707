//! `omae` — command-line harness for the masked-autoencoder pipeline:
//! dataset preprocessing and splitting, MAE pretraining, classification
//! fine-tuning with multi-seed evaluation, VQA adaptation, metric reports
//! and reconstruction visualization.

mod commands;
mod config;
mod io;
mod provider;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "omae", version, about = "Masked-autoencoder pipeline for multimodal retinal-style imaging")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Quality-filter, crop and resize a raw image corpus.
    Preprocess(PreprocessArgs),
    /// Assign train/val/test splits to a manifest.
    Split(SplitArgs),
    /// Masked-autoencoder pretraining.
    Pretrain(PretrainArgs),
    /// Fine-tune a classifier over one or more seeds and report metrics.
    Finetune(FinetuneArgs),
    /// Score a split with a fine-tuned checkpoint.
    Predict(PredictArgs),
    /// Compute metrics from a predictions file.
    Evaluate(EvaluateArgs),
    /// Significance test between two evaluation reports.
    Compare(CompareArgs),
    /// Adapt the VQA decoder on question/answer pairs.
    VqaTrain(VqaTrainArgs),
    /// Generate answers and text metrics for a QA manifest.
    VqaEval(VqaEvalArgs),
    /// Render original / masked / reconstruction panels for one image.
    Visualize(VisualizeArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Manifest describing the raw images (paths relative to --input-dir).
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    input_dir: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    /// Output side length in pixels.
    #[arg(long, default_value_t = 256)]
    size: usize,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output manifest path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// TOML config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest whose directory holds the images.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for the checkpoint and loss log.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    augment: Option<bool>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Pretrained encoder checkpoint; omitted = train from scratch.
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// "single-label" or "multi-label".
    #[arg(long)]
    mode: Option<String>,
    /// Directory for per-seed checkpoints.
    #[arg(long)]
    out_dir: PathBuf,
    /// Directory for predictions, per-seed metrics and the report.
    #[arg(long)]
    report_dir: PathBuf,
    /// Comma-separated seed list, e.g. "0,1,2,3,4".
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    epochs: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    linear_probe: Option<bool>,
    #[arg(long)]
    early_stop_val_auroc: Option<f64>,
    #[arg(long)]
    smoothing: Option<f64>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    /// Fine-tuned checkpoint (carries architecture, mode and class names).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Which split to score: "train", "val" or "test".
    #[arg(long, default_value = "test")]
    split: String,
    /// Output predictions JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predictions JSON produced by `predict` or `finetune`.
    #[arg(long)]
    predictions: PathBuf,
    /// Output metrics JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    report_a: PathBuf,
    #[arg(long)]
    report_b: PathBuf,
    /// Output report (report A annotated with the p-value).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the paired test instead of Welch's.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    paired: Option<bool>,
}

#[derive(Args)]
struct VqaTrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// QA manifest (JSON lines: image_path, question, answer).
    #[arg(long)]
    qa: PathBuf,
    /// Image root; defaults to the QA manifest's directory.
    #[arg(long)]
    images_dir: Option<PathBuf>,
    /// Pretrained encoder checkpoint; omitted = fresh encoder.
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<f64>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    unfreeze_encoder: Option<bool>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Args)]
struct VqaEvalArgs {
    /// Adapted checkpoint from `vqa-train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    qa: PathBuf,
    #[arg(long)]
    images_dir: Option<PathBuf>,
    /// Output predictions (JSON lines with reference + prediction).
    #[arg(long)]
    out: PathBuf,
    /// Optional text-metrics summary JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct VisualizeArgs {
    /// Pretraining checkpoint (encoder + decoder weights).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image (PNG or PPM).
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    mask_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output image: original, masked and reconstruction side by side.
    #[arg(long)]
    out: PathBuf,
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Preprocess(a) => commands::preprocess::run(a),
        Cmd::Split(a) => commands::preprocess::run_split(a),
        Cmd::Pretrain(a) => commands::pretrain::run(a),
        Cmd::Finetune(a) => commands::experiment::run_finetune(a),
        Cmd::Predict(a) => commands::experiment::run_predict(a),
        Cmd::Evaluate(a) => commands::experiment::run_evaluate(a),
        Cmd::Compare(a) => commands::experiment::run_compare(a),
        Cmd::VqaTrain(a) => commands::vqa::run_train(a),
        Cmd::VqaEval(a) => commands::vqa::run_eval(a),
        Cmd::Visualize(a) => commands::visualize::run(a),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
