use std::process::ExitCode;

use clap::Parser;
use ssn_cli::{execute, Cli};

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            if let ssn_cli::CliError::Violations { log, .. } = &e {
                print!("{log}");
            }
            eprintln!("ssnsim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
