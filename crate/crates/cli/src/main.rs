use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use koopman_cli::{
    cmd_control, cmd_fit, cmd_grid, cmd_simulate, cmd_verify, parse_region, CliError, GridRequest, Outcome, RunOptions,
    Session, EXIT_CONFIG,
};

#[derive(Parser)]
#[command(name = "koopman", version, about = "Koopman eigenfunction fitting, theorem checks and control experiments")]
struct Cli {
    /// Experiment config (JSON); the shipped defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print a machine-readable summary to stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one trajectory and write it as CSV.
    Simulate {
        #[arg(long)]
        system: String,
        /// Initial state, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        x0: Vec<f64>,
        /// Final time; negative integrates backwards.
        #[arg(long, allow_negative_numbers = true)]
        t: f64,
        #[arg(long, default_value_t = 100)]
        steps: usize,
    },
    /// Fit the configured models and write their artifacts.
    Fit {
        /// Only this fit block.
        #[arg(long)]
        fit: Option<String>,
    },
    /// Run the theorem checks.
    Verify {
        /// Only these check ids (repeatable or comma separated).
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
    /// Evaluate a fitted eigenfunction on a grid.
    Grid {
        #[arg(long)]
        fit: String,
        #[arg(long)]
        pair: usize,
        /// `lo:hi` per axis, comma separated; defaults to the training region.
        #[arg(long, allow_hyphen_values = true)]
        region: Option<String>,
        /// Points per axis, comma separated (one value applies to all axes).
        #[arg(long, value_delimiter = ',', default_value = "101")]
        resolution: Vec<usize>,
        /// Model artifact; defaults to model_<fit>.json in the output directory.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run the lifted-control basin-crossing experiment.
    Control,
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    let opts = RunOptions {
        out: cli.out,
        seed: cli.seed,
    };
    let session = Session::load(cli.config.as_deref(), &opts)?;
    match cli.command {
        Command::Simulate { system, x0, t, steps } => cmd_simulate(&session, &system, &x0, t, steps),
        Command::Fit { fit } => cmd_fit(&session, fit.as_deref()),
        Command::Verify { only } => cmd_verify(&session, (!only.is_empty()).then_some(only.as_slice())),
        Command::Grid {
            fit,
            pair,
            region,
            resolution,
            model,
        } => {
            let region = region.as_deref().map(parse_region).transpose()?;
            cmd_grid(
                &session,
                &GridRequest {
                    fit,
                    pair,
                    region,
                    resolution,
                    model,
                },
            )
        }
        Command::Control => cmd_control(&session),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => {
            let err = CliError::Config(e.to_string().trim_end().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    let json = cli.json;
    match run(cli) {
        Ok(outcome) => {
            if json {
                println!("{}", outcome.summary);
            } else {
                print!("{}", outcome.human);
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
