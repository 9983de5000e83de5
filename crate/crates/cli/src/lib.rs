//! Command-line front end: experiment runs, verification suites, parameter
//! and bandwidth accounting, and run reports.

pub mod commands;
pub mod config;

use clap::{Parser, Subcommand};

/// Exit codes: 0 success, 2 config error, 3 numeric abort, 4 verification
/// failure.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Parser)]
#[command(
    name = "fedcycle",
    about = "Federated unpaired two-domain translation trainer",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train a model from a config file and write run artifacts.
    Train {
        /// Path to the experiment config.
        #[arg(long)]
        config: std::path::PathBuf,
        /// centralized | federated | switchable-federated
        #[arg(long, default_value = "federated")]
        mode: String,
        /// Override the output directory (also via FEDCYCLE_OUT_DIR).
        #[arg(long)]
        out: Option<std::path::PathBuf>,
    },
    /// Run a verification suite with fixed seeds.
    Verify {
        /// decomposition | gradcheck | equivalence | codec
        #[arg(long)]
        suite: String,
    },
    /// Print parameter-count and message-size comparisons.
    Bench {
        /// params | bytes
        #[arg(long, default_value = "params")]
        what: String,
    },
    /// Evaluate a completed run directory on its held-out data.
    Report {
        /// Run directory written by `train`.
        #[arg(long)]
        run: std::path::PathBuf,
    },
    /// Emit gnuplot-ready data files from a run's history.
    PlotData {
        /// Run directory written by `train`.
        #[arg(long)]
        run: std::path::PathBuf,
    },
}

/// Entry point shared by `main` and the CLI tests.
pub fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Train { config, mode, out } => commands::cmd_train(&config, &mode, out.as_deref()),
        Command::Verify { suite } => commands::cmd_verify(&suite),
        Command::Bench { what } => commands::cmd_bench(&what),
        Command::Report { run } => commands::cmd_report(&run),
        Command::PlotData { run } => commands::cmd_plot_data(&run),
    }
}
