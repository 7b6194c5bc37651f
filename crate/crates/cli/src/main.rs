mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::CliError;

const EXIT_CODES: &str = "Exit codes:
  0  success
  1  check failed (gradcheck above tolerance)
  2  usage or configuration error (bad flag, unreadable config, missing path)
  3  data or format error (corrupt corpus, checkpoint or cache; dimension mismatch)";

#[derive(Debug, Parser)]
#[command(name = "dgrx", version, about = "Dependency-graph relation classification head", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the head and keep the best dev-F1 checkpoint.
    #[command(after_help = EXIT_CODES)]
    Train(TrainArgs),
    /// Score a checkpoint on a split and write JSON/CSV reports.
    #[command(after_help = EXIT_CODES)]
    Evaluate(EvaluateArgs),
    /// Compare analytic and finite-difference gradients on a random model.
    #[command(after_help = EXIT_CODES)]
    Gradcheck(GradcheckArgs),
    /// Encode a split and write an embedding cache.
    #[command(after_help = EXIT_CODES)]
    Embed(EmbedArgs),
    /// Write the planted-signal toy corpus and a matching training config.
    #[command(after_help = EXIT_CODES)]
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderArg {
    Hashed,
    Cache,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DistanceArg {
    Between,
    StartOffset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WidthArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct ProviderFlags {
    /// Encoder provider; overrides the config file.
    #[arg(long, value_enum)]
    provider: Option<ProviderArg>,
    /// Embedding service base URL for the remote provider.
    #[arg(long)]
    endpoint: Option<String>,
    /// Global seed; falls back to DGRX_SEED, then the config file.
    #[arg(long, env = "DGRX_SEED")]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoint.dgck and train_log.jsonl.
    #[arg(long, default_value = "dgrx-out")]
    out: PathBuf,
    /// Embedding cache for the cache provider; overrides the config file.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[command(flatten)]
    provider: ProviderFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to score (TACRED-style JSON).
    #[arg(long)]
    data: PathBuf,
    /// Training config; supplies label/mask registries, provider and seed.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CoNLL-U parses to attach instead of the bundled heads.
    #[arg(long)]
    parses: Option<PathBuf>,
    /// Output directory for report.json, report.csv and predictions.json.
    #[arg(long, default_value = "dgrx-eval")]
    out: PathBuf,
    /// Distance buckets, e.g. "0-7,8-10,11+".
    #[arg(long, default_value = dgrx_core::eval::DEFAULT_BUCKETS)]
    buckets: String,
    #[arg(long, value_enum, default_value = "between")]
    distance_metric: DistanceArg,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[command(flatten)]
    provider: ProviderFlags,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Optional JSON with tokens, d_enc, d_gcn, d_ff, layers, relations, eps,
    /// seed, min_margin, max_attempts.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Central-difference step.
    #[arg(long, allow_negative_numbers = true)]
    eps: Option<f64>,
    #[arg(long, env = "DGRX_SEED")]
    seed: Option<u64>,
    /// Debug: corrupt the backward pass (bias gradients doubled).
    #[arg(long)]
    inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Split to encode (TACRED-style JSON).
    #[arg(long)]
    data: PathBuf,
    /// Cache file to write.
    #[arg(long)]
    out: PathBuf,
    /// Training config; supplies registries, provider, seed and d_enc.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Encoder width for the hashed provider (remote uses the service's).
    #[arg(long)]
    d_enc: Option<usize>,
    #[arg(long, value_enum, default_value = "f64")]
    width: WidthArg,
    #[command(flatten)]
    provider: ProviderFlags,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory to write train.json, dev.json, labels.json, config.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "DGRX_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    train_size: usize,
    #[arg(long, default_value_t = 40)]
    dev_size: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<i32, CliError> = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Embed(a) => commands::embed(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
