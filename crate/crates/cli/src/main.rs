use std::process::ExitCode;

use clap::Parser;
use dkt_core::DktError;

mod args;
mod commands;
mod config;

use args::{Cli, Command};
use commands::Globals;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

fn exit_code(e: &DktError) -> u8 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else if matches!(e, DktError::InvalidConfig(_)) {
        EXIT_USAGE
    } else {
        EXIT_DATA
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors by itself
    let cli = Cli::parse();
    let g = Globals {
        threads: cli.threads,
        seed: cli.seed,
        verbose: cli.verbose,
    };
    let result = match &cli.command {
        Command::Generate(a) => commands::generate_cmd(a, &g),
        Command::Preprocess(a) => commands::preprocess_cmd(a, &g),
        Command::Fit(a) => commands::fit_cmd(a, &g),
        Command::Stage(a) => commands::stage_cmd(a, &g),
        Command::Predict(a) => commands::predict_cmd(a, &g),
        Command::Evaluate(a) => commands::evaluate_cmd(a, &g),
        Command::Compare(a) => commands::compare_cmd(a, &g),
        Command::ExportCurves(a) => commands::export_cmd(a, &g),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
