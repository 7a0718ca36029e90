//! `lifespan`: fit, predict, sample and simulate lifespan additive mixed models.

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lifespan_core::Error;

mod commands;
mod options;
mod output;

use options::Options;

#[derive(Parser)]
#[command(name = "lifespan", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model by REML; writes model.json and coefficient, smooth and variance tables.
    Fit(Options),
    /// Population-level predictions over an age grid.
    Predict(Options),
    /// Cross-sectional and longitudinal effect curves.
    Effects(Options),
    /// Posterior draws: pointwise and simultaneous bands, age at maximum with HDI.
    Sample(Options),
    /// Run the simulated model comparison (or write one synthetic dataset).
    Simulate(Options),
    /// Summarise a `simulate` output directory.
    Report(Options),
    /// Basis-dimension check of every univariate smooth.
    Check(Options),
}

fn run(cli: Cli) -> lifespan_core::Result<()> {
    match cli.command {
        Command::Fit(o) => commands::fit(&o.resolve()?),
        Command::Predict(o) => commands::predict(&o.resolve()?),
        Command::Effects(o) => commands::effects(&o.resolve()?),
        Command::Sample(o) => commands::sample(&o.resolve()?),
        Command::Simulate(o) => commands::simulate(&o.resolve()?),
        Command::Report(o) => commands::report(&o.resolve()?),
        Command::Check(o) => commands::check(&o.resolve()?),
    }
}

fn error_json(e: &Error) -> serde_json::Value {
    let mut v = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
    if let Error::Convergence { iterations, gradient_norm, trace } = e {
        v["iterations"] = (*iterations).into();
        v["gradient_norm"] = (*gradient_norm).into();
        v["trace"] = trace.clone().into();
    }
    v
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
