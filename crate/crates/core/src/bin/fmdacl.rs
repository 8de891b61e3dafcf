use std::process::ExitCode;

use clap::Parser;
use fmdacl::cli::{error_line, run, Cli};
use fmdacl::config::SEED_ENV;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage msg=\"{}\"", first.replace('"', "'"));
            return ExitCode::from(2);
        }
    };
    let seed = std::env::var(SEED_ENV).ok();
    match run(cli, seed.as_deref()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
