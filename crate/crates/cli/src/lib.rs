//! The `eventshift` command line.
//!
//! Every command writes into a run directory and leaves a
//! `run-<command>.json` [`manifest::RunManifest`] there.

pub mod commands;
pub mod config;
pub mod data;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use eventshift_core::baselines::StrategyKind;
use eventshift_core::probing::{Component, ProbeTarget};

/// Exit status for invalid input or configuration.
pub const EXIT_VALIDATION: i32 = 1;
/// Exit status for failures on valid input.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "run failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<eventshift_core::Error> for CliError {
    fn from(e: eventshift_core::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "eventshift", version, about = "Event-debiased post classification pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `training.lambda=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Start from the synthetic-experiment settings instead of the defaults.
    #[arg(long, global = true)]
    pub synthetic_preset: bool,
    /// Output directory; defaults to `runs/<command>-<UTC timestamp>`.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus from the `[synthetic]` settings.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Temporal, event-disjoint split of a corpus.
    Split {
        /// JSONL corpus; defaults to `data.corpus`.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Tag bias tokens in every post of a split directory.
    Identify {
        #[arg(long)]
        split_dir: PathBuf,
    },
    /// Train one strategy for each seed and evaluate on the test split.
    Train {
        #[arg(long)]
        split_dir: PathBuf,
        /// Bias tokens from `identify`; by default they are tagged afresh.
        #[arg(long)]
        bias_dir: Option<PathBuf>,
        /// Overrides `strategy.kind`.
        #[arg(long)]
        strategy: Option<StrategyKind>,
        /// Overrides `training.seeds`. Repeatable.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Train seeds concurrently, one worker thread each.
        #[arg(long)]
        parallel_seeds: bool,
    },
    /// Score a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Linear probes on frozen representations.
    Probe {
        /// Checkpoint providing the bias and main components.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Vanilla checkpoint providing the baseline component.
        #[arg(long)]
        baseline_checkpoint: Option<PathBuf>,
        #[arg(long)]
        split_dir: PathBuf,
        /// Overrides `probe.components`. Repeatable.
        #[arg(long = "component")]
        components: Vec<Component>,
        /// Overrides `probe.tasks`. Repeatable.
        #[arg(long = "task")]
        tasks: Vec<ProbeTarget>,
        /// Run probe seeds concurrently.
        #[arg(long)]
        parallel_seeds: bool,
    },
    /// Comparison tables from evaluation reports.
    Report {
        /// Run directories to read reports from; defaults to the run directory.
        #[arg(long = "from")]
        from: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Strategy the deltas and p-values refer to.
        #[arg(long, default_value = "vanilla")]
        reference: String,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Split { .. } => "split",
            Command::Identify { .. } => "identify",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Probe { .. } => "probe",
            Command::Report { .. } => "report",
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { 0 };
        }
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("EVENTSHIFT_LOG")
        .try_init();
    match commands::execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("eventshift {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
