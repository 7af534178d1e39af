mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit statuses shared by all subcommands.
pub(crate) mod exit {
    pub const FAILURE: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const INPUT: u8 = 3;
}

#[derive(Debug)]
pub(crate) struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

#[derive(Parser)]
#[command(name = "outlierwatch", version, about = "Real-time outlier detection for database connections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stream JSONL connection events through a policy and emit verdicts.
    Run(RunArgs),
    /// Write a synthetic JSONL event stream drawn from a population file.
    Simulate {
        #[arg(long)]
        population: PathBuf,
        #[arg(long)]
        count: u64,
        /// Overrides the seed stored in the population file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Monte Carlo check of coverage at N = ceil(n ln(n/delta)).
    ValidateBound {
        #[arg(long)]
        n: u64,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 10_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Verify a snapshot file and print a summary.
    InspectSnapshot {
        file: PathBuf,
        /// Also check stored phases against this policy.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Run the 2160-class learning/detection replica and print its report.
    Scenario {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["input", "stdin", "listen"])))]
pub(crate) struct RunArgs {
    #[arg(long)]
    pub policy: PathBuf,
    /// Read events from a file.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Read events from standard input.
    #[arg(long)]
    pub stdin: bool,
    /// Accept newline-delimited JSON over TCP, one connection at a time.
    #[arg(long, value_name = "ADDR")]
    pub listen: Option<String>,
    /// Load baselines from this file if it exists and save them back.
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
    #[arg(long, requires = "snapshot", value_parser = clap::value_parser!(u64).range(1..))]
    pub snapshot_every: Option<u64>,
    /// Only write alert and terminate verdicts.
    #[arg(long)]
    pub alerts_only: bool,
    /// Write per-rule metrics to stderr every K events.
    #[arg(long, value_name = "K", value_parser = clap::value_parser!(u64).range(1..))]
    pub metrics_every: Option<u64>,
    /// Threads used to evaluate rules.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run::cmd_run(&args),
        Command::Simulate {
            population,
            count,
            seed,
        } => commands::cmd_simulate(&population, count, seed),
        Command::ValidateBound {
            n,
            delta,
            trials,
            seed,
        } => commands::cmd_validate_bound(n, delta, trials, seed),
        Command::InspectSnapshot { file, policy } => {
            commands::cmd_inspect_snapshot(&file, policy.as_deref())
        }
        Command::Scenario { seed } => commands::cmd_scenario(seed),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("outlierwatch: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
