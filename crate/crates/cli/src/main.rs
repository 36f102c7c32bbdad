//! `dhat`: train, evaluate and inspect dual-head networks.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dhat_core::nn::HeadMode;
use dhat_core::Error;

#[derive(Parser, Debug)]
#[command(name = "dhat", version, about = "Dual-head adversarial training")]
struct Cli {
    /// Worker threads for attack generation; DHAT_THREADS takes precedence.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the staged training pipeline described by a config file.
    Train(TrainArgs),
    /// Clean and adversarial accuracy of one checkpoint.
    Eval(EvalArgs),
    /// Self-attack and transfer accuracies of two checkpoints.
    CrossEval(CrossEvalArgs),
    /// Parameter census and metadata of a checkpoint or an architecture.
    Inspect(InspectArgs),
    /// Write the amplified perturbation of one test sample as PNG.
    ExportNoise(ExportNoiseArgs),
    /// Generate a synthetic dataset in IDX or CIFAR binary format.
    SynthData(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run only this stage (1, 2 or 3).
    #[arg(long)]
    stage: Option<u8>,
    /// Checkpoint to start from; defaults to the previous stage's output.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AttackArg {
    None,
    Fgsm,
    Pgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum HeadsArg {
    Main,
    Second,
    Merged,
}

impl From<HeadsArg> for HeadMode {
    fn from(h: HeadsArg) -> Self {
        match h {
            HeadsArg::Main => HeadMode::Main,
            HeadsArg::Second => HeadMode::Second,
            HeadsArg::Merged => HeadMode::Merged,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct AttackArgs {
    #[arg(long, value_enum, default_value = "pgd")]
    attack: AttackArg,
    #[arg(long, default_value_t = 8.0 / 255.0)]
    eps: f64,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    /// Defaults to 2.5 * eps / steps.
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    #[arg(long)]
    no_random_start: bool,
}

/// Where evaluation data comes from: a run config's test split or a data
/// config file.
#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
struct DataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    attack: AttackArgs,
    /// Output to evaluate; the checkpoint's default when absent.
    #[arg(long, value_enum)]
    heads: Option<HeadsArg>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Evaluate only the first N test samples.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 200)]
    batch: usize,
}

#[derive(Args, Debug)]
struct CrossEvalArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    attack: AttackArgs,
    #[arg(long, value_enum)]
    heads: Option<HeadsArg>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 200)]
    batch: usize,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false, id = "target")]
struct InspectTarget {
    #[arg(long)]
    model: Option<PathBuf>,
    /// JSON with `arch`, optional `attach`, `second_head` and `merge`.
    #[arg(long)]
    arch_config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    target: InspectTarget,
    /// Print the census as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct ExportNoiseArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    attack: AttackArgs,
    #[arg(long, value_enum)]
    heads: Option<HeadsArg>,
    /// Test sample index.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 20.0)]
    gain: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Idx,
    Cifar,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 28)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    #[arg(long, default_value_t = 2)]
    blobs: usize,
    /// Samples held out as the test split.
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long, value_enum, default_value = "idx")]
    format: FormatArg,
}

/// Exit status for a failed command.
fn exit_code(err: &anyhow::Error) -> u8 {
    let core = err.chain().find_map(|e| e.downcast_ref::<Error>());
    match core {
        Some(Error::Config { .. } | Error::Argument(_)) => 2,
        Some(Error::Checkpoint(_) | Error::Format(_) | Error::Io { .. } | Error::Architecture(_)) => 3,
        Some(Error::NonFinite { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let ctx = match commands::Context::new(cli.workers, cli.seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::CrossEval(a) => commands::cross_eval(&ctx, a),
        Command::Inspect(a) => commands::inspect(a),
        Command::ExportNoise(a) => commands::export_noise(&ctx, a),
        Command::SynthData(a) => commands::synth_data(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
