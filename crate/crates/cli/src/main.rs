mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use dsdr_core::{DataError, Error};
use serde_json::{json, Value};

use args::{Cli, Command};

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) => 3,
        Error::Solver(_) | Error::Estimator(_) => 4,
    }
}

/// Column and row of a data error, when it names them.
fn location(e: &Error) -> (Option<&str>, Option<usize>) {
    match e {
        Error::Data(DataError::MissingColumn(c)) => (Some(c), None),
        Error::Data(DataError::NonBinaryIndicator { column, row, .. })
        | Error::Data(DataError::NonFiniteValue { column, row, .. }) => (Some(column), Some(*row)),
        Error::Data(DataError::ExternalTreated { row }) => (None, Some(*row)),
        Error::Data(DataError::Csv(c)) => (None, c.position().map(|p| p.record() as usize)),
        _ => (None, None),
    }
}

fn report(module: &str, message: String, column: Option<&str>, row: Option<usize>) {
    let mut err = json!({ "module": module, "message": message });
    if let Some(c) = column {
        err["column"] = Value::from(c);
    }
    if let Some(r) = row {
        err["row"] = Value::from(r);
    }
    eprintln!("{}", json!({ "error": err }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            report("config", e.render().to_string().trim().to_string(), None, None);
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Estimate(a) => commands::run_estimate(a),
        Command::Simulate(a) => commands::run_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (column, row) = location(&e);
            report(e.module(), e.to_string(), column, row);
            ExitCode::from(exit_code(&e))
        }
    }
}
