//! `semvoc` command-line front-end.
//!
//! Flags can come from a flat `key = value` file via `--config <file>`;
//! flags given on the command line win. Every command prints its resolved
//! configuration first and saves it under `reports/`, so that file re-runs
//! the command exactly.

mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};

use args::Cli;
use config::CliError;

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", config::category(&e), config::one_line(&e));
            ExitCode::from(2)
        }
    }
}

fn run(argv: Vec<String>) -> anyhow::Result<()> {
    let argv = config::expand_config(argv)?;
    let matches = Cli::command()
        .mut_subcommands(|c| c.args_override_self(true))
        .try_get_matches_from(argv);
    let matches = match matches {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("bad arguments").trim_start_matches("error: ").to_string();
            return Err(CliError::Usage(first).into());
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::Usage(e.to_string()))?;
    commands::dispatch(cli.command)
}
