use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctdense_cli::{cmd_curves, cmd_describe, cmd_evaluate, cmd_predict, cmd_synth, cmd_train};
use ctdense_cli::{CliError, CurveOptions, DescribeOptions, RunConfig};

/// DenseNet classifier for COVID-19 and severity labels on chest CT volumes.
#[derive(Parser)]
#[command(name = "ctdense", version)]
struct Cli {
    /// Run configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_pair)]
    set: Vec<(String, String)>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fresh model; writes metrics.csv and checkpoints to the output directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset; writes a per-patient CSV.
    Evaluate(EvaluateArgs),
    /// Classify a single .mha volume.
    Predict(PredictArgs),
    /// Print the feature-map plan, parameter count and layer count.
    Describe(DescribeArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Turn a metrics CSV into smoothed loss and accuracy series.
    Curves(CurvesArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Directory containing reference.csv and data/.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Directory of <patient id>.mha volumes.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Reference CSV with PatientID,probCOVID,probSevere columns.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// densenet121, densenet169 or reduced.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    validation_count: Option<String>,
    /// Validate on the training records themselves.
    #[arg(long)]
    validate_on_train: bool,
    /// Save a checkpoint every N epochs (0: final only).
    #[arg(long)]
    checkpoint_every: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Directory for cached preprocessed images.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    threshold: Option<String>,
    /// Per-patient result table.
    #[arg(long, default_value = "evaluation.csv")]
    output: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    volume: PathBuf,
    #[arg(long)]
    threshold: Option<String>,
}

#[derive(Args)]
struct DescribeArgs {
    /// Preset name or checkpoint path.
    target: String,
    /// Classifier width (default 2).
    #[arg(long)]
    outputs: Option<usize>,
    #[arg(long)]
    input_channels: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// In-plane size of each generated volume.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CurvesArgs {
    metrics: PathBuf,
    /// Trailing moving-average window.
    #[arg(long, default_value_t = 1)]
    window: usize,
    /// Keep every N-th point.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value = "curves")]
    out_dir: PathBuf,
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

fn push(overrides: &mut Vec<(String, String)>, key: &str, value: Option<impl ToString>) {
    if let Some(v) = value {
        overrides.push((key.to_string(), v.to_string()));
    }
}

impl DataArgs {
    fn overrides(&self, o: &mut Vec<(String, String)>) {
        push(o, "dataset", self.dataset.as_ref().map(|p| p.display()));
        push(o, "data_dir", self.data_dir.as_ref().map(|p| p.display()));
        push(o, "reference", self.reference.as_ref().map(|p| p.display()));
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.set;
    let out = &mut io::stdout().lock();
    match cli.command {
        Command::Train(a) => {
            a.data.overrides(&mut overrides);
            push(&mut overrides, "preset", a.preset);
            push(&mut overrides, "epochs", a.epochs);
            push(&mut overrides, "batch_size", a.batch_size);
            push(&mut overrides, "seed", a.seed);
            push(&mut overrides, "lr", a.lr);
            push(&mut overrides, "validation_count", a.validation_count);
            push(&mut overrides, "validate_on_train", a.validate_on_train.then_some(true));
            push(&mut overrides, "checkpoint_every", a.checkpoint_every);
            push(&mut overrides, "output_dir", a.output_dir.as_ref().map(|p| p.display()));
            push(&mut overrides, "cache_dir", a.cache_dir.as_ref().map(|p| p.display()));
            let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
            cmd_train(&cfg, out).map(drop)
        }
        Command::Evaluate(a) => {
            a.data.overrides(&mut overrides);
            push(&mut overrides, "threshold", a.threshold);
            let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
            cmd_evaluate(&cfg, &a.checkpoint, &a.output, out).map(drop)
        }
        Command::Predict(a) => {
            push(&mut overrides, "threshold", a.threshold);
            let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
            cmd_predict(&cfg, &a.checkpoint, &a.volume, out).map(drop)
        }
        Command::Describe(a) => {
            let opts = DescribeOptions {
                num_outputs: a.outputs,
                input_channels: a.input_channels,
            };
            cmd_describe(&a.target, &opts, out).map(drop)
        }
        Command::Synth(a) => cmd_synth(a.n, a.seed, a.size, &a.out, out).map(drop),
        Command::Curves(a) => {
            let opts = CurveOptions {
                window: a.window,
                stride: a.stride,
                out_dir: a.out_dir,
            };
            cmd_curves(&a.metrics, &opts, out).map(drop)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
