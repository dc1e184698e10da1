use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = beamkit::cli::Cli::parse();
    match beamkit::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
