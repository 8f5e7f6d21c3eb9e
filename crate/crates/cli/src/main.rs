mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("SEPPRUNE_GIT_DESCRIBE"), ")");

/// Bad flags, configuration, missing inputs or stage-order problems.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Structured channel pruning for 1D-convolutional separation models.
///
/// Stages read and write under the output root:
/// train -> learn-mask -> prune -> finetune -> eval. `ablate` and `profile`
/// stand alone.
#[derive(Debug, Parser)]
#[command(name = "sepprune", version = VERSION)]
pub struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root directory for all stage outputs.
    #[arg(long, global = true, env = "SEPPRUNE_OUT", default_value = "runs")]
    pub out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parameter and MAC counts per layer and per component.
    Profile {
        /// Profile this checkpoint instead of a freshly initialized model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Input length in samples (default: data.length).
        #[arg(long)]
        length: Option<usize>,
        /// Also time this many forward passes.
        #[arg(long, default_value_t = 0)]
        timing_runs: usize,
    },
    /// Train the full model on the synthetic training split.
    Train,
    /// Learn channel masks for the trained model with its weights frozen.
    LearnMask {
        /// Model to mask (default: the train stage's checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Physically remove masked channels.
    Prune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Mask file (default: the learn-mask stage's output).
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Fine-tune the pruned model.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare original, random-mask, magnitude-mask and learned-mask models.
    Eval,
    /// Threshold sweep, iteration sweep and step-wise vs joint optimization.
    Ablate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<sepprune::Error>() {
        Some(
            sepprune::Error::InvalidArgument(_)
            | sepprune::Error::Checkpoint(_)
            | sepprune::Error::MaskFile(_)
            | sepprune::Error::Wav(_),
        ) => 2,
        _ => 1,
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
    match stages::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
