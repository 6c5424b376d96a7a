//! `spanproto`: generate synthetic episodes, train, evaluate and inspect.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spanproto::synthetic::Disjointness;

#[derive(Parser)]
#[command(name = "spanproto", version, about = "Few-shot NER with span-based prototypes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/dev/test episode files.
    Generate(GenerateArgs),
    /// Train a model, optionally over several seeds or a hyperparameter grid.
    Train(TrainArgs),
    /// Score a checkpoint on an episode file.
    Eval(EvalArgs),
    /// Dump boundary scores and embeddings for one episode.
    Inspect(InspectArgs),
}

#[derive(Args)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config field, e.g. `train.optimizer.learning_rate=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Directory holding train.jsonl, dev.jsonl and test.jsonl.
    #[arg(long, env = "SPANPROTO_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,
    /// Parent directory for run outputs.
    #[arg(long, default_value = "runs")]
    pub runs_dir: PathBuf,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ways: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    /// Query sentences per episode.
    #[arg(long)]
    pub query: Option<usize>,
    /// Training episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Dev and test episodes each.
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    #[arg(long)]
    pub mode: Option<Disjointness>,
    #[arg(long)]
    pub distractor_prob: Option<f64>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Output directory; defaults to the data directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training episodes; defaults to train.jsonl in the data directory.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Episodes scored after training; defaults to test.jsonl in the data
    /// directory when it exists.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long, conflicts_with = "eval")]
    pub no_eval: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub no_margin_loss: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated seeds; one run each, then mean and deviation.
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    pub seeds: Vec<u64>,
    /// JSON file mapping config keys to value lists; every combination runs.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint file, or a run directory containing model.json.
    #[arg(long)]
    pub model: PathBuf,
    /// Episode file; defaults to test.jsonl in the data directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    /// Output directory; defaults to a new run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    /// Episode file; defaults to test.jsonl in the data directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub episode: usize,
    /// Include span and prototype vectors.
    #[arg(long)]
    pub dump_embeddings: bool,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    /// Output file; defaults to a new run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<commands::UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
