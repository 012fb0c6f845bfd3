mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{expand_config, Cli, Command};

/// 0 success, 1 runtime error, 2 usage or configuration error.
fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let argv = match expand_config(raw) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let exec = commands::exec_mode(cli.sequential);
    let result = match &cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a, exec),
        Command::Eval(a) => commands::eval(a, exec),
        Command::Ablate(a) => commands::ablate(a, exec),
        Command::Export(a) => commands::export(a, exec),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(e.downcast_ref::<cierec::Error>(), Some(cierec::Error::Config(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
