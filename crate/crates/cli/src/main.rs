mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dfsense_core::pipeline::{Task, Variant};
use dfsense_core::Error;

/// Decision-focused flood sensor placement.
#[derive(Debug, Parser)]
#[command(name = "dfsense", version)]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a scenario suite and write it to a directory.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Pre-train and train end to end; writes a checkpoint and a per-epoch log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        scenarios: Option<PathBuf>,
        /// Checkpoint directory.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        task: Option<Task>,
        /// Epochs for both phases; `--pretrain-epochs` overrides the first.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        pretrain_epochs: Option<usize>,
    },
    /// Score methods on the test share of a suite.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        scenarios: Option<PathBuf>,
        /// `learned` or `placement+imputer+decider`, e.g. `fixed+idw+ilp`. Repeatable.
        #[arg(short, long = "method")]
        methods: Vec<String>,
        /// All 8 baseline combinations, plus `learned` when a checkpoint is given.
        #[arg(long)]
        all_baselines: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `evac`, `match` or `all`; defaults to the configured training task.
        #[arg(long)]
        task: Option<String>,
        /// Record wall-clock inference time (makes output non-reproducible).
        #[arg(long)]
        timing: bool,
        /// Metrics CSV path; stdout when omitted.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Train and score the four ablation variants under one seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Existing suite; generated from the configuration when omitted.
        #[arg(short, long)]
        scenarios: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        pretrain_epochs: Option<usize>,
    },
    /// Print the default configuration as TOML.
    ConfigDefault,
}

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub const IO: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const NUMERIC: u8 = 3;

    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: Self::USAGE, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: Self::IO, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NonFinite(_) => Self::NUMERIC,
            Error::Io { .. } | Error::Format { .. } | Error::Json(_) => Self::IO,
            _ => Self::USAGE,
        };
        Self { code, message: e.to_string() }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("DFSENSE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("DFSENSE_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("cannot size thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Simulate { common, out } => commands::simulate(&common, out),
        Command::Train { common, scenarios, out, variant, task, epochs, pretrain_epochs } => {
            commands::train(&common, scenarios, out, variant, task, epochs, pretrain_epochs)
        }
        Command::Evaluate { common, scenarios, methods, all_baselines, checkpoint, task, timing, out } => {
            commands::evaluate(&common, scenarios, &methods, all_baselines, checkpoint, task, timing, out)
        }
        Command::Ablate { common, scenarios, out, task, epochs, pretrain_epochs } => {
            commands::ablate(&common, scenarios, out, task, epochs, pretrain_epochs)
        }
        Command::ConfigDefault => {
            print!("{}", config::RunConfig::default().to_toml());
            Ok(())
        }
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
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
