//! Command-line driver: loads a profile plus an optional JSON overlay,
//! dispatches a subcommand and maps failures to exit codes.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod report;
pub mod svg;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{ExperimentConfig, Overrides, Profile};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "datarater",
    version,
    about = "Meta-learned data rating experiments"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON overlay on the profile defaults; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for CSVs, checkpoints, config and manifest.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
}

#[derive(Debug, Args)]
pub struct RaterArg {
    /// Rater checkpoint manifest (overrides `rater_checkpoint`).
    #[arg(long)]
    pub rater: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Noise-bin toy experiment.
    Toy,
    /// Meta-train a rater on the configured corpus.
    MetaTrain,
    /// Stream the training pool through the rater's accept probability.
    Filter {
        #[command(flatten)]
        rater: RaterArg,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        cdf_sample: Option<usize>,
        /// Merge shards in shard order (default) or completion order.
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        ordered: Option<bool>,
    },
    /// Discard-fraction sweep with rater top-K filtering.
    Sweep {
        #[command(flatten)]
        rater: RaterArg,
    },
    /// Train one language model, optionally filtered.
    Train {
        #[command(flatten)]
        rater: RaterArg,
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Heuristic correlations, regression, mixtures and compute-to-match.
    Analyze {
        #[command(flatten)]
        rater: RaterArg,
    },
    /// Render charts from run-directory CSVs.
    Report {
        /// Run directories to read (repeatable).
        #[arg(long)]
        input: Vec<PathBuf>,
    },
}

/// Runs a parsed command with `env` standing in for the process
/// environment. Returns the output directory.
pub fn execute(cli: &Cli, env: impl Fn(&str) -> Option<String>) -> CliResult<PathBuf> {
    let ov = Overrides {
        profile: cli.common.profile,
        seed: cli.common.seed,
        out: cli.common.out.clone(),
        workers: cli.common.workers,
    }
    .with_env(env)?;
    let cfg = config::load(cli.common.config.as_deref(), &ov)?;
    match &cli.command {
        Command::Toy => commands::cmd_toy(&cfg),
        Command::MetaTrain => commands::cmd_meta_train(&cfg),
        Command::Filter {
            rater,
            rho,
            cdf_sample,
            ordered,
        } => {
            let flags = commands::FilterFlags {
                rho: *rho,
                cdf_sample: *cdf_sample,
                ordered: *ordered,
            };
            commands::cmd_filter(&cfg, rater.rater.as_deref(), &flags)
        }
        Command::Sweep { rater } => commands::cmd_sweep(&cfg, rater.rater.as_deref()),
        Command::Train { rater, rho } => commands::cmd_train(&cfg, rater.rater.as_deref(), *rho),
        Command::Analyze { rater } => commands::cmd_analyze(&cfg, rater.rater.as_deref()),
        Command::Report { input } => commands::cmd_report(&cfg, input),
    }
}

/// Parses `args`, runs, prints errors and returns the exit code. Argument
/// errors count as configuration errors.
pub fn run<I, T>(args: I, env: impl Fn(&str) -> Option<String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli, env) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("datarater: {e}");
            e.exit_code()
        }
    }
}
