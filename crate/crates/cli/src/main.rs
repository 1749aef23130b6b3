//! `ldamp`: dataset building, training, recovery, state evolution and
//! benchmarking from the command line.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 I/O, 4 training
//! divergence, 5 dimension or numeric failure.

mod args;
mod commands;

use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};
use ldamp::Error;

use args::{Cli, Command};

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Argument(_) | Error::Config(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Training { .. } => 4,
        Error::Dimension(_) | Error::Numeric { .. } => 5,
    }
}

fn run(cli: Cli, matches: &clap::ArgMatches) -> ldamp::Result<()> {
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    match cli.command {
        Command::Dataset(a) => {
            let (g, a, resolved) = args::resolve(cli.global, a, name, sub)?;
            commands::dataset(&g, &a, &resolved)
        }
        Command::Train(a) => {
            let (g, a, resolved) = args::resolve(cli.global, a, name, sub)?;
            commands::train(&g, &a, &resolved)
        }
        Command::Recover(a) => {
            let (g, a, resolved) = args::resolve(cli.global, a, name, sub)?;
            commands::recover(&g, &a, &resolved)
        }
        Command::Se(a) => {
            let (g, a, resolved) = args::resolve(cli.global, a, name, sub)?;
            commands::se(&g, &a, &resolved)
        }
        Command::Bench(a) => {
            let (g, a, resolved) = args::resolve(cli.global, a, name, sub)?;
            commands::bench(&g, &a, &resolved)
        }
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    match run(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Usage(_)) {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
