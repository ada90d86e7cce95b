//! Command-line front end: argument parsing, run layout, sweeps and reports.

pub mod args;
pub mod commands;
pub mod report;
pub mod svg;
pub mod sweep;

use budgetcomm::Error;

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InstanceTooLarge(_) | Error::Json(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Evaluation(_) | Error::Checkpoint(_) => 4,
        _ => 1,
    }
}
