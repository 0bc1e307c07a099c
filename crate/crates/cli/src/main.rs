//! attrpipe: one entry point wiring the pipeline modules together.
//!
//! Exit codes: 0 success, 2 usage error, 3 config validation failure,
//! 1 anything else. Failures print one machine-parsable JSON line to stderr.

mod args;
mod commands;
mod config;

use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = args::Cli::parse();
    if let Err(e) = commands::run(cli.command) {
        e.exit();
    }
}
