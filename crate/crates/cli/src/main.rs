use std::fs;
use std::process;

use clap::Parser;

mod cli;
use cli::{Cli, Command, VerifyArgs};

mod commands;
mod plot;
mod suites;

use probe_core::{Error, Result};

const EXIT_VALIDATION: i32 = 2;
const EXIT_NUMERIC: i32 = 3;

enum Outcome {
    Done,
    ChecksFailed(usize),
}

fn verify(args: &VerifyArgs) -> Result<Outcome> {
    let records = suites::run(args.suite, args.seed)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::Io(format!("{}: {e}", args.out.display())))?;
    let path = args.out.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(&records)?)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let failed = records.iter().filter(|r| !r.pass).count();
    for r in &records {
        println!(
            "{} {} ({} = {:e}, tolerance {:e})",
            if r.pass { "ok  " } else { "FAIL" },
            r.check,
            r.metric,
            r.value,
            r.tolerance
        );
    }
    println!(
        "{}/{} checks passed, report in {}",
        records.len() - failed,
        records.len(),
        path.display()
    );
    Ok(if failed == 0 {
        Outcome::Done
    } else {
        Outcome::ChecksFailed(failed)
    })
}

fn run(command: &Command) -> Result<Outcome> {
    match command {
        Command::Fit1d(a) => commands::fit1d(a),
        Command::Fitnd(a) => commands::fitnd(a),
        Command::FitConditional(a) => commands::fit_conditional(a),
        Command::Classify(a) => commands::classify(a),
        Command::Regress(a) => commands::regress(a),
        Command::EstimateParams(a) => commands::estimate_params_cmd(a),
        Command::Evolve(a) => commands::evolve(a),
        Command::Verify(a) => return verify(a),
    }
    .map(|()| Outcome::Done)
}

fn main() {
    // clap exits with status 2 and prints usage on unknown flags
    let args = Cli::parse();
    match run(&args.command) {
        Ok(Outcome::Done) => (),
        Ok(Outcome::ChecksFailed(n)) => {
            eprintln!("error: {n} verification checks failed");
            process::exit(EXIT_NUMERIC);
        }
        Err(e) => {
            eprintln!("error: {e}");
            process::exit(if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_NUMERIC
            });
        }
    }
}
