use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = flowplan::cli::Cli::parse();
    match flowplan::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
