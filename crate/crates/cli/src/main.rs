//! `tsem`: generate data, train classifiers, explain them and score the
//! explanations.
//!
//! Every flag can also be set through a `TSEM_`-prefixed environment variable
//! or a flat TOML file passed with `--config`. Precedence: flag, then
//! environment, then file, then built-in default.

mod args;
mod commands;
mod config;
mod io;
mod report;
mod svg;

use std::process::ExitCode;

use clap::Parser;
use tsem::Error;

use args::{Cli, Command};

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_)
        | Error::Config(_)
        | Error::UnknownMethod { .. }
        | Error::UnknownActivation(_)
        | Error::ClassOutOfRange { .. } => 2,
        Error::Parse { .. }
        | Error::Dataset(_)
        | Error::Version { .. }
        | Error::Checkpoint(_)
        | Error::Io(_)
        | Error::Dimension { .. } => 3,
        Error::Numeric(_) | Error::Untrained { .. } => 4,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Usage(_) => "usage",
        Error::Config(_) => "config",
        Error::UnknownMethod { .. } => "unknown_method",
        Error::UnknownActivation(_) => "unknown_activation",
        Error::ClassOutOfRange { .. } => "class_out_of_range",
        Error::Parse { .. } => "parse",
        Error::Dataset(_) => "dataset",
        Error::Version { .. } => "checkpoint_version",
        Error::Checkpoint(_) => "checkpoint",
        Error::Io(_) => "io",
        Error::Dimension { .. } => "dimension",
        Error::Numeric(_) => "numeric",
        Error::Untrained { .. } => "untrained",
    }
}

fn fail(e: &Error) -> ExitCode {
    let code = exit_code(e);
    let msg = serde_json::json!({ "error": { "kind": kind(e), "exit_code": code, "message": e.to_string() } });
    eprintln!("{msg}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let argv = match config::merge_config_file(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => return fail(&e),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
        {
            return fail(&Error::Config(format!(
                "cannot start {} worker threads: {e}",
                cli.jobs
            )));
        }
    }
    let result = match &cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Explain(a) => commands::explain(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Rank(a) => commands::rank(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
