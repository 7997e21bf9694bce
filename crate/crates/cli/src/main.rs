use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    govsim_cli::cli::main_with(govsim_cli::cli::Cli::parse())
}
