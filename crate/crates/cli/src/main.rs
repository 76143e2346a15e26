mod artifacts;
mod cmd_eval;
mod cmd_lenet;
mod cmd_reconstruct;
mod cmd_sample;
mod cmd_train;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "spxc", version = config::BUILD_ID, about = "Coordinate-conditioned patch PixelCNN")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Run config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value`, repeatable; bare keys resolve to run, network or train fields.
    #[arg(long = "override", value_name = "K=V")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the VAE and PixelCNN.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from `<out>/last.spxc` when present.
        #[arg(long)]
        resume: bool,
        #[arg(long, short)]
        verbose: bool,
    },
    /// Draw prior samples at any resolution.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 28)]
        side: usize,
    },
    /// Reconstruct images from their latent code at one or more resolutions.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Input PNGs; without them the first `--mnist-test` test images are used.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        mnist_test: usize,
        #[arg(long, value_delimiter = ',', default_value = "28,56,112,224")]
        sides: Vec<usize>,
    },
    /// Compute one metric and write it as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(value_enum)]
        metric: cmd_eval::MetricKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        lenet: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value_t = 28)]
        side: usize,
        /// Every window of every image (bpd).
        #[arg(long)]
        exhaustive: bool,
        /// Windows per image (bpd, when not exhaustive).
        #[arg(long)]
        windows: Option<usize>,
        /// Score real MNIST test images instead of model output.
        #[arg(long)]
        real: bool,
    },
    /// Train the MNIST classifier used by the confidence and accuracy metrics.
    LenetTrain {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path (default: configured path or `<out>/lenet.spxc`).
        #[arg(long)]
        lenet: Option<PathBuf>,
        #[arg(long, short)]
        verbose: bool,
    },
}

pub(crate) fn write_json(path: &Path, v: &serde_json::Value) -> CliResult<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(|e| CliError::Runtime(format!("{}: {e}", d.display())))?;
    }
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load(c: &Common) -> CliResult<config::RunConfig> {
    config::load(c.config.as_deref(), &c.overrides, c.seed, c.out.as_deref())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::Train { common, resume, verbose } => cmd_train::run(&load(&common)?, resume, verbose),
        Cmd::Sample { common, checkpoint, count, side } => {
            cmd_sample::run(&load(&common)?, checkpoint.as_deref(), count, side)
        }
        Cmd::Reconstruct { common, checkpoint, inputs, mnist_test, sides } => {
            let inputs = if inputs.is_empty() {
                cmd_reconstruct::Inputs::MnistTest(mnist_test)
            } else {
                cmd_reconstruct::Inputs::Files(inputs)
            };
            cmd_reconstruct::run(&load(&common)?, checkpoint.as_deref(), &inputs, &sides)
        }
        Cmd::Eval { common, metric, checkpoint, lenet, count, side, exhaustive, windows, real } => {
            let o = cmd_eval::EvalOptions {
                checkpoint: checkpoint.as_deref(),
                lenet: lenet.as_deref(),
                count,
                side,
                exhaustive,
                windows,
                real,
            };
            cmd_eval::run(&load(&common)?, metric, &o)
        }
        Cmd::LenetTrain { common, lenet, verbose } => cmd_lenet::run(&load(&common)?, lenet.as_deref(), verbose),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
