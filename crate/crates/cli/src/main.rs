//! `permon`: command-line front end for scenario files.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "permon",
    version,
    about = "Persistent monitoring simulator and gradient optimizer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a scenario file and report on the target motion assumptions.
    Validate {
        scenario: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Simulate once and write states, events and a summary.
    Simulate {
        scenario: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, short, default_value = "out")]
        output: PathBuf,
    },
    /// Run projected gradient descent from the file's initial parameters.
    Optimize {
        scenario: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, short, default_value = "out")]
        output: PathBuf,
        /// Compare every accepted iterate's gradient against central differences.
        #[arg(long)]
        grad_check: bool,
    },
    /// Run one of the bundled experiment harnesses.
    Experiment {
        kind: ExperimentArg,
        scenario: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, short, default_value = "out")]
        output: PathBuf,
    },
}

#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// Replaces every seed in the file (initialization, noise, experiment).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Integration step.
    #[arg(long)]
    pub step: Option<f64>,
    /// Optimizer iteration limit.
    #[arg(long = "max-iters")]
    pub max_iters: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum ExperimentArg {
    Static,
    Deadzone,
    Noise,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Validate { scenario, overrides } => commands::validate(&scenario, &overrides),
        Command::Simulate {
            scenario,
            overrides,
            output,
        } => commands::simulate(&scenario, &overrides, &output),
        Command::Optimize {
            scenario,
            overrides,
            output,
            grad_check,
        } => commands::optimize(&scenario, &overrides, &output, grad_check),
        Command::Experiment {
            kind,
            scenario,
            overrides,
            output,
        } => commands::experiment(kind, &scenario, &overrides, &output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
