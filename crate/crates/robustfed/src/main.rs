use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use robustfed::cli::{cmd_resilience, cmd_simulate, cmd_sweep};

#[derive(Parser)]
#[command(
    name = "robustfed",
    version,
    about = "Byzantine-robust federated learning experiments: simulation, resilience estimation and sweeps"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federated training experiment and write metrics.csv + summary.json.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override a config key, e.g. --set run.rounds=5 (repeatable).
        #[arg(long = "set")]
        set: Vec<String>,
        /// Shorthand for --set seed=<int>, applied last.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate the resilience conditions by Monte Carlo and write report.json.
    Resilience {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a cross-product of simulate cells and write an index.json.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Sweep axis, e.g. --axis variant=original,layerwise_cosine
        /// (repeatable; axes: operator, variant, byzantine_fraction, d, seed).
        #[arg(long = "axis")]
        axis: Vec<String>,
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Maximum number of cells to run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn with_seed(mut sets: Vec<String>, seed: Option<u64>) -> Vec<String> {
    if let Some(seed) = seed {
        sets.push(format!("seed={seed}"));
    }
    sets
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = match args.command {
        Command::Simulate {
            config,
            out,
            set,
            seed,
        } => cmd_simulate(&config, &out, &with_seed(set, seed)),
        Command::Resilience {
            config,
            out,
            set,
            seed,
        } => cmd_resilience(&config, &out, &with_seed(set, seed)),
        Command::Sweep {
            config,
            out,
            axis,
            set,
            seed,
            jobs,
        } => cmd_sweep(&config, &out, &with_seed(set, seed), &axis, jobs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.exit_code() as u8)
        }
    }
}
