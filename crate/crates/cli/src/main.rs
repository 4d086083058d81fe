use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "pcn", version, about = "Predictive-coding CNN with early exits: train, evaluate and profile")]
struct Cli {
    /// Worker threads; 1 makes every run bit-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint: fixed-cycle sweep, one cycle count, or early exit.
    Eval(EvalArgs),
    /// Parameter breakdown, model size and FLOPs per cycle.
    Inspect(ModelArgs),
    /// Single-sample latency for 1..=T cycles.
    Bench(BenchArgs),
    /// Exit distribution over a sweep of confidence thresholds.
    ProfileExits(ProfileArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run config whose `[data]` section names the evaluation data.
    #[arg(long)]
    pub config: PathBuf,
    /// Early-exit threshold in [0, 1].
    #[arg(long, conflicts_with = "cycles")]
    pub threshold: Option<f64>,
    /// Evaluate exactly this many cycles.
    #[arg(long)]
    pub cycles: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ModelArgs {
    /// A, B or C.
    #[arg(long, conflicts_with_all = ["config", "checkpoint"])]
    pub preset: Option<String>,
    /// Run config; its `[model]` section is used.
    #[arg(long, conflicts_with = "checkpoint")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Maximum cycles (presets and configs only).
    #[arg(long)]
    pub cycles: Option<usize>,
    /// Print the JSON report instead of text.
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 500)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Thresholds to profile; defaults to 0.0, 0.1, ..., 1.0.
    #[arg(long, num_args = 1..)]
    pub threshold: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set up {n} threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Bench(a) => commands::bench(a),
        Command::ProfileExits(a) => commands::profile_exits(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
