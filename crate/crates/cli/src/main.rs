use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod sweep;

#[derive(Parser)]
#[command(name = "ehoir", version, about = "Egocentric hand-object interaction detection at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its feature grids.
    Gen(GenArgs),
    /// Train a detector and evaluate it on the test split.
    Train(TrainArgs),
    /// Write predictions of a trained run.
    Infer(InferArgs),
    /// Score a predictions file against a dataset.
    Eval(EvalArgs),
    /// Finite-difference checks of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Train and compare the component, reference-point and K ablations.
    Sweep(SweepArgs),
}

#[derive(Args)]
pub struct GenArgs {
    /// Scene config JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Falls back to the config file, then EHOIR_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_frames: Option<usize>,
    #[arg(long)]
    pub n_verbs: Option<usize>,
    #[arg(long)]
    pub n_objects: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
}

#[derive(Args, Clone)]
pub struct TrainOverrides {
    /// Training config JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Falls back to the config file, then EHOIR_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Component switches, e.g. `use_hpe=false,use_ir=false,use_hge=false`.
    #[arg(long)]
    pub ablation: Option<String>,
    /// direct, learnable, center or top-center.
    #[arg(long)]
    pub reference_mode: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Threads for frame-level inference.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Defaults to `<run>/predictions.jsonl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args)]
pub struct EvalArgs {
    /// JSONL predictions.
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset JSON; the test split is scored.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Report directory; the table is printed either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// First seed; the suite runs `--seeds` consecutive seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Print one JSON object per check instead of the table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Runs trained in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Sweep(a) => sweep::run(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
