//! Command-line front end: CSV/JSON/SVG input and output around `hdiv_core`.

pub mod error;
pub mod estimate;
pub mod io;
pub mod manifest;
pub mod simulate;
pub mod svg;

use clap::{Parser, Subcommand};

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "hdiv",
    version,
    about = "Desparsified IV Lasso estimation and Monte Carlo studies"
)]
pub struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "HDIV_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate β and build intervals for linear functionals from CSV data.
    Estimate(estimate::EstimateArgs),
    /// Run the Monte Carlo study over a (rho, alpha1) grid.
    Simulate(simulate::SimulateArgs),
}

/// Runs a parsed command on a pool of the requested size.
pub fn run(cli: &Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Input("--threads must be >= 1".into()));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Input(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Estimate(a) => estimate::run_estimate(a),
        Command::Simulate(a) => simulate::run_simulate(a),
    })
}
