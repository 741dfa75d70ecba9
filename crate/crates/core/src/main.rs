use std::process::ExitCode;

use clap::Parser;
use invedit::cli::{run, Cli};

fn main() -> ExitCode {
    run(Cli::parse())
}
