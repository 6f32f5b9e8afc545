use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match egl::execute(egl::Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
