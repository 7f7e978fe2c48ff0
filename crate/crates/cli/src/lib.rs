//! Command-line driver: `run`, `sweep`, `hypsweep`, `phase2-only` and
//! `verify`.
//!
//! Exit status is 0 on success, 1 for usage errors, 2 for runtime failures
//! (including partially failed trial sets) and 3 when verification fails.

pub mod config;
pub mod error;
pub mod exec;

use std::ffi::OsString;

pub use config::{parse_args, Mode, RunConfig};
pub use error::CliError;
pub use exec::execute;

/// Parses and runs; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let result = parse_args(args).and_then(|cfg| execute(&cfg));
    match result {
        Ok(()) => 0,
        Err(CliError::Clap(e)) => {
            let _ = e.print();
            CliError::Clap(e).exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
