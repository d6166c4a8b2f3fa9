//! `geomano` command-line interface.

mod alloc;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use commands::Cli;

#[global_allocator]
static GLOBAL: alloc::Counting = alloc::Counting;

pub const BUILD_ID: &str = env!("GEOMANO_BUILD_ID");

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Debug } else { log::LevelFilter::Info })
        .parse_env("GEOMANO_LOG")
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            log::error!("{err}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
