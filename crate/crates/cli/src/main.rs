use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Frequency dynamic convolution toolkit: features, inference, verification,
/// benchmarks, metrics and a toy training run.
#[derive(Debug, Parser)]
#[command(name = "fdy", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Log-mel features for a WAV file or every WAV in a directory.
    Featurize(FeaturizeArgs),
    /// Frame scores, median filtering and event decoding for feature files.
    Infer(InferArgs),
    /// Randomized property suites over the FDY layer.
    Verify(VerifyArgs),
    /// Finite-difference check of the FDY backward pass.
    Gradcheck(GradcheckArgs),
    /// Median wall time of the naive, efficient and plain convolution paths.
    Bench(BenchArgs),
    /// Collar-based and intersection-based F1 of a hypothesis TSV.
    Eval(EvalArgs),
    /// Trains the mini FDY model on the synthetic band task.
    TrainToy(TrainToyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Model configuration file (key=value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the number of basis kernels.
    #[arg(long)]
    k: Option<usize>,
    /// Overrides the attention softmax temperature.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: DTypeArg,
}

#[derive(Debug, Args)]
struct FeaturizeArgs {
    /// WAV file or directory of WAV files.
    input: PathBuf,
    /// Output file for a single input, output directory otherwise.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: DTypeArg,
    #[arg(long)]
    sample_rate: Option<u32>,
    #[arg(long)]
    n_fft: Option<usize>,
    #[arg(long)]
    hop_length: Option<usize>,
    #[arg(long)]
    n_mels: Option<usize>,
}

#[derive(Debug, Args)]
struct InferArgs {
    /// Feature files written by `featurize`, shape [mels, frames].
    #[arg(required = true)]
    features: Vec<PathBuf>,
    #[arg(long)]
    weights: PathBuf,
    /// Events TSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Architecture used when no --config is given: `toy` or `mini`.
    #[arg(long, default_value = "toy")]
    preset: String,
    /// Class count for the `toy` preset.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Comma-separated class labels; defaults to class_0, class_1, ...
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Median filter width: one odd value for every class, or one per class.
    #[arg(long, value_delimiter = ',', default_value = "7")]
    median_window: Vec<usize>,
    /// Seconds per input frame before any time pooling in the model.
    #[arg(long, default_value_t = 256.0 / 16000.0)]
    frame_seconds: f64,
    /// Writes each FDY layer's attention weights per clip into this directory.
    #[arg(long)]
    dump_attention: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FaultArg {
    /// Leave attention weights unnormalized.
    SkipNormalization,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, value_enum)]
    fault: Option<FaultArg>,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Shape preset: `default` or `tiny`.
    #[arg(long, default_value = "default")]
    preset: String,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-3)]
    bound: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Shape preset: `default` or `small`.
    #[arg(long, default_value = "default")]
    preset: String,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Reference events TSV.
    reference: PathBuf,
    /// Hypothesis events TSV.
    hypothesis: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    dtc: f64,
    #[arg(long, default_value_t = 0.5)]
    gtc: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainToyArgs {
    /// Task preset; only `band` exists.
    #[arg(long, default_value = "band")]
    preset: String,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    /// Training accuracy that ends the run early; exit status 1 if never reached.
    #[arg(long, default_value_t = 0.95)]
    target: f64,
    /// Writes the trained weights here, and the configuration next to them.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Featurize(a) => commands::featurize(a),
        Command::Infer(a) => commands::infer(a),
        Command::Verify(a) => commands::verify(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Bench(a) => commands::bench(a),
        Command::Eval(a) => commands::eval(a),
        Command::TrainToy(a) => commands::train_toy(a),
    };
    match outcome {
        Ok(commands::Status::Success) => ExitCode::SUCCESS,
        Ok(commands::Status::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
