//! `diffcast`: synth-data generation, training, evaluation, prediction, and
//! memory/time scaling benchmarks for the slim-graph forecasting engine.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffcast_core::memstats::CountingAllocator;
use diffcast_core::CoreError;

// The bench command reads the engine's own allocation counters instead of
// OS RSS; that requires the counting allocator to be the process allocator.
#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator::new();

#[derive(Parser)]
#[command(
    name = "diffcast",
    version,
    about = "Multivariate time-series forecasting over a learned slim graph"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hub-driven dataset plus a ground-truth sidecar.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint, per-epoch log, and metrics.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint at the requested horizons.
    Eval(EvalArgs),
    /// Forecast the next steps from the tail of a dataset.
    Predict(PredictArgs),
    /// Measure adjacency-pipeline peak memory and wall time across graph sizes.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output CSV path.
    #[arg(long)]
    out: std::path::PathBuf,
    /// Ground-truth JSON sidecar path (defaults to the CSV path with a
    /// .json extension).
    #[arg(long)]
    sidecar: Option<std::path::PathBuf>,
    #[arg(long, default_value_t = 50)]
    nodes: usize,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value_t = 10)]
    hubs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// Model/training knobs shared by `train` and (partly) `bench`. Every field
/// has a default; a JSON config file with the same flat keys can set any of
/// them, and command-line flags override the file.
#[derive(Args, Clone)]
struct ModelFlags {
    /// JSON config file with flat keys mirroring these flags.
    #[arg(long)]
    config: Option<std::path::PathBuf>,
    /// Significant-neighbor set size (defaults to min(100, N-1)).
    #[arg(long = "M")]
    neighborhood: Option<usize>,
    /// Frequency-ranked portion of the neighbor set (defaults to 4M/5).
    #[arg(long = "K")]
    top_k: Option<usize>,
    /// Diffusion depth of each graph convolution.
    #[arg(long = "J")]
    diffusion_steps: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Hidden width of the recurrent cell.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Entmax sparsity parameter in [1.0, 2.5].
    #[arg(long)]
    alpha: Option<f64>,
    /// Encoder history length h.
    #[arg(long)]
    history: Option<usize>,
    /// Decoder forecast length f.
    #[arg(long)]
    forecast: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Window stride over the training split.
    #[arg(long)]
    stride: Option<usize>,
    /// Add a day-of-week input channel.
    #[arg(long)]
    day_of_week: bool,
    /// Iteration count after which the neighbor set freezes (defaults to
    /// 80% of planned iterations).
    #[arg(long)]
    convergence_iter: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset CSV.
    #[arg(long)]
    data: std::path::PathBuf,
    /// Output directory for checkpoint, log, and metrics.
    #[arg(long, default_value = ".")]
    out: std::path::PathBuf,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: std::path::PathBuf,
    #[arg(long)]
    data: std::path::PathBuf,
    /// Comma-separated 1-based horizons to report.
    #[arg(long, default_value = "3,6,12", value_delimiter = ',')]
    horizon: Vec<usize>,
    /// Which chronological split of the data to evaluate.
    #[arg(long, default_value = "test")]
    split: commands::EvalSplit,
    /// Metrics JSON output path.
    #[arg(long, default_value = "metrics.json")]
    out: std::path::PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: std::path::PathBuf,
    /// History CSV; the last h steps feed the encoder.
    #[arg(long)]
    data: std::path::PathBuf,
    /// Forecast CSV output path.
    #[arg(long, default_value = "forecast.csv")]
    out: std::path::PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated node counts to probe.
    #[arg(long = "bench-N", default_value = "500,1000,2000", value_delimiter = ',')]
    bench_n: Vec<usize>,
    /// Neighbor set size at every probe point.
    #[arg(long = "M", default_value_t = 100)]
    neighborhood: usize,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    /// Use the full N x N route instead of the slim gather route.
    #[arg(long)]
    dense_mode: bool,
    #[arg(long, default_value_t = 8)]
    embed_dim: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Report JSON output path.
    #[arg(long, default_value = "bench_report.json")]
    out: std::path::PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(), // clap uses exit code 2 for usage errors
    };
    let result = match cli.command {
        Command::Synth(args) => commands::synth(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Predict(args) => commands::predict(args),
        Command::Bench(args) => commands::bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

/// Stable contract: 0 success, 2 usage/config error, 3 data/checkpoint
/// error. Anything else is an internal failure.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::InvalidConfig(_)) | Some(CoreError::AlphaOutOfRange(_)) => 2,
        Some(CoreError::Data { .. })
        | Some(CoreError::Checkpoint(_))
        | Some(CoreError::Io(_))
        | Some(CoreError::EmptySupervision)
        | Some(CoreError::Diverged { .. })
        | Some(CoreError::NonFinite { .. }) => 3,
        Some(_) => 1,
        None => {
            if err.downcast_ref::<std::io::Error>().is_some()
                || err.downcast_ref::<serde_json::Error>().is_some()
            {
                3
            } else if err.downcast_ref::<commands::ConfigError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}
