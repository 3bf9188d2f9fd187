use std::process::ExitCode;

use bihoi_cli::cli::Cli;
use bihoi_cli::error_kind;
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e:#}", error_kind(&e));
            ExitCode::FAILURE
        }
    }
}
