use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod outdir;

use commands::CliError;

#[derive(Parser)]
#[command(
    name = "ditto-forge",
    version,
    about = "Synthesize multi-device storage I/O traces"
)]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic corpus of traces and their configurations.
    SynthesizeCorpus(SynthesizeArgs),
    /// Cut CSV traces into grid-sized windows and store them as a corpus.
    Ingest(IngestArgs),
    /// Train the CHIP encoders or the diffusion model.
    Train {
        #[command(subcommand)]
        kind: TrainKind,
    },
    /// Generate traces for a target configuration.
    Generate(GenerateArgs),
    /// Generate a long trace by outpainting segment after segment.
    Extend(ExtendArgs),
    /// Compare generated traces against real ones.
    Evaluate(EvaluateArgs),
}

#[derive(Subcommand)]
enum TrainKind {
    Chip(TrainArgs),
    Diffusion(TrainArgs),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthesizeArgs {
    /// Corpus specification (JSON).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; must be empty or absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    common: Common,
    /// Trace CSV files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus directory, overriding the configuration.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Checkpoint directory, overriding the configuration.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Replace an existing checkpoint.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TargetArgs {
    /// Target workload configuration (JSON).
    #[arg(long, conflicts_with_all = ["read_ratio", "total_requests", "utilization", "burstiness"])]
    target: Option<PathBuf>,
    #[arg(long)]
    read_ratio: Option<f64>,
    #[arg(long)]
    total_requests: Option<u64>,
    /// Comma-separated per-device shares.
    #[arg(long, value_delimiter = ',')]
    utilization: Option<Vec<f64>>,
    #[arg(long)]
    burstiness: Option<f64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Classifier-free guidance scale (>= 1).
    #[arg(long)]
    guidance: Option<f32>,
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExtendArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    target: TargetArgs,
    /// First segment as an image container; generated when absent.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Re-run a chain manifest written by an earlier extend.
    #[arg(long, conflicts_with = "base")]
    chain: Option<PathBuf>,
    #[arg(long)]
    segments: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
    #[arg(long)]
    guidance: Option<f32>,
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of real traces (a corpus or any folder of trace CSVs).
    #[arg(long)]
    real: PathBuf,
    /// Directory of generated traces.
    #[arg(long)]
    generated: PathBuf,
    /// Second generated group; enables the locality effect size.
    #[arg(long)]
    generated_b: Option<PathBuf>,
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SynthesizeCorpus(a) => commands::synthesize_corpus(a),
        Command::Ingest(a) => commands::ingest(a),
        Command::Train {
            kind: TrainKind::Chip(a),
        } => commands::train_chip(a),
        Command::Train {
            kind: TrainKind::Diffusion(a),
        } => commands::train_diffusion(a),
        Command::Generate(a) => commands::generate(a),
        Command::Extend(a) => commands::extend(a),
        Command::Evaluate(a) => commands::evaluate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
