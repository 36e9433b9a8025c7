use clap::Parser;
use std::process::ExitCode;
use voltgrid::cli::{init_logging, run, Cli, CliError};

fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()).map_err(anyhow::Error::from) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(3, CliError::exit_code);
            ExitCode::from(code)
        }
    }
}
