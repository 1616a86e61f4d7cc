//! `gradflow`: run gradient-flow experiments on small networks and export
//! trajectories, spectral diagnostics and probe reports.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "gradflow", version, about = "Gradient descent flow laboratory for small feedforward networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate the parameter flow for a network and dataset; write trajectory and diagnostics CSVs.
    Simulate(RunConfig),
    /// Compare the integrated output-space flow with its closed-form solution.
    Compare(RunConfig),
    /// Integrate the scalar toy model and fit the divergence exponent.
    Toy1d(RunConfig),
    /// Gram spectrum, projectors and cost split at one parameter point.
    Diagnose(RunConfig),
    /// Basin probe: many seeded flows compared with a target parameter vector.
    Probe(RunConfig),
}

#[derive(Debug)]
pub enum CliError {
    /// Bad or missing configuration; exit code 2.
    Usage(String),
    /// Failure while running a valid configuration; exit code 1.
    Run(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) | Self::Run(m) => f.write_str(m),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(c) => c.merged("simulate").and_then(commands::simulate),
        Command::Compare(c) => c.merged("compare").and_then(commands::compare),
        Command::Toy1d(c) => c.merged("toy1d").and_then(commands::toy1d),
        Command::Diagnose(c) => c.merged("diagnose").and_then(commands::diagnose),
        Command::Probe(c) => c.merged("probe").and_then(commands::probe),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                CliError::Run(_) => ExitCode::from(1),
            }
        }
    }
}
