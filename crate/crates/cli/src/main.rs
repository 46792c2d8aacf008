mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Multiphase segmentation of rock volumes.
#[derive(Parser, Debug)]
#[command(name = "samamba", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom and its exact labels.
    Phantom(PhantomArgs),
    /// Denoise, align and standardize volumes; write the reference statistics.
    Preprocess(PreprocessArgs),
    /// Train a model from image and label volumes.
    Train(TrainArgs),
    /// Segment a volume with a trained checkpoint.
    Segment(SegmentArgs),
    /// Dice and IoU of a prediction against a reference labeling.
    Eval(EvalArgs),
    /// Porosity, saturations, interfacial areas and Euler numbers of a labeling.
    Report(ReportArgs),
    /// Parameter count and multiply-accumulate estimate of a configuration.
    Summary(SummaryArgs),
    /// Print a complete configuration file.
    Config(ConfigArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Args, Debug)]
struct ConfigSource {
    /// TOML run configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

#[derive(Args, Debug)]
struct PhantomArgs {
    /// sphere-pack, layered-bed, droplet-field or wetting-film.
    #[arg(long)]
    kind: String,
    /// One extent for a cube, or three as D,H,W.
    #[arg(long, value_delimiter = ',', num_args = 1..=3, default_value = "64")]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    porosity: Option<f64>,
    #[arg(long)]
    blur: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    /// Output prefix; writes `<out>_image` and `<out>_labels`.
    #[arg(long, default_value = "phantom")]
    out: PathBuf,
    #[command(flatten)]
    source: ConfigSource,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Volumes to process.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Apply existing statistics instead of fitting them on the inputs.
    #[arg(long)]
    stats_in: Option<PathBuf>,
    /// Where fitted statistics are written.
    #[arg(long, default_value = "reference.toml")]
    stats_out: PathBuf,
    #[arg(long)]
    no_nlm: bool,
    #[command(flatten)]
    source: ConfigSource,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    /// Label volumes, one per image.
    #[arg(long, num_args = 1.., required = true)]
    labels: Vec<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Reference statistics; fitted on the images when absent.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// The images are already standardized.
    #[arg(long)]
    preprocessed: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[command(flatten)]
    source: ConfigSource,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Output label volume.
    #[arg(long)]
    out: PathBuf,
    /// Also write one probability volume per class with this prefix.
    #[arg(long)]
    probs: Option<PathBuf>,
    /// Statistics overriding those stored in the checkpoint.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// The input is already standardized.
    #[arg(long)]
    preprocessed: bool,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    no_nlm: bool,
    #[command(flatten)]
    source: ConfigSource,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SummaryArgs {
    /// Patch extent for the multiply-accumulate estimate.
    #[arg(long)]
    patch: Option<usize>,
    #[command(flatten)]
    source: ConfigSource,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
}

fn init_threads() -> Result<(), commands::CliError> {
    if let Ok(v) = std::env::var("SAMAMBA_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| commands::CliError::Usage(format!("SAMAMBA_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(commands::CliError::Usage("SAMAMBA_THREADS must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| commands::CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| match cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Train(a) => commands::train(a),
        Command::Segment(a) => commands::segment(a),
        Command::Eval(a) => commands::eval(a),
        Command::Report(a) => commands::report(a),
        Command::Summary(a) => commands::summary(a),
        Command::Config(a) => commands::config(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
