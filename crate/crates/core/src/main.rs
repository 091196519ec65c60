use std::process::ExitCode;

use clap::Parser;
use w2sg_core::cli::{execute, Cli, Status};

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::ChecksFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
