use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

mod commands;
mod meta;

/// Exit codes: 0 success, 1 other failure, 2 invalid flags or configuration,
/// 3 I/O or malformed data files, 4 training divergence, 5 checkpoint
/// corruption or version mismatch.
#[derive(Parser, Debug)]
#[command(
    name = "dcbv",
    version,
    about = "Tagged-to-cine MR translation on synthetic phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Generate a paired tagged/cine phantom dataset.
    GenData(GenDataArgs),
    /// Train one method on a dataset.
    Train(TrainArgs),
    /// Translate tagged PGM images to cine with a checkpoint.
    Translate(TranslateArgs),
    /// Score a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Train and score all four methods with one shared config.
    Compare(CompareArgs),
    /// Pick loss weights by validation SSIM.
    GridSearch(GridSearchArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    subjects: usize,
    #[arg(long, default_value_t = 26)]
    frames: usize,
    /// Image side length in pixels (power of two, at least 16).
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
    /// Tag modulation depth in [0, 1]; 0 makes tagged images equal cine.
    #[arg(long)]
    tag_amplitude: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// TrainConfig JSON; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's method.
    #[arg(long)]
    method: Option<String>,
    /// Overrides the config's step count.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct TranslateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A tagged PGM file or a directory of them.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Surrogate classifier file; trained and written there if missing,
    /// trained in memory if the flag is absent.
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Directory for metrics_report.csv and run_meta.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Also write per_sample.csv.
    #[arg(long)]
    per_sample: bool,
}

#[derive(Args, Debug, Serialize)]
struct CompareArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// As for evaluate.
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Test samples shown in the montage.
    #[arg(long, default_value_t = 4)]
    montage_rows: usize,
}

#[derive(Args, Debug, Serialize)]
struct GridSearchArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Semicolon-separated `alpha,beta,lambda` points.
    #[arg(long, default_value = "1,1,0.5;0.1,1,0.5;0.01,1,0.5")]
    grid: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a, &cli.command),
        Command::Train(a) => commands::train(a, &cli.command),
        Command::Translate(a) => commands::translate(a, &cli.command),
        Command::Evaluate(a) => commands::evaluate(a, &cli.command),
        Command::Compare(a) => commands::compare(a, &cli.command),
        Command::GridSearch(a) => commands::grid_search(a, &cli.command),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
