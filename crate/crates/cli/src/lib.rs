//! Command-line front end: data ingestion, model files and the `cph`
//! subcommands.

pub mod args;
pub mod commands;
pub mod data;
pub mod error;
pub mod model_file;

use std::ffi::OsString;
use std::io::Write;

use clap::error::ErrorKind;
use clap::Parser;

pub use args::Cli;
pub use error::{CliError, CliResult};
pub use model_file::ModelFile;

pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> CliResult<()> {
    use args::Command::*;
    match &cli.command {
        Fit(a) => commands::cmd_fit(a, out),
        Eval(a) => commands::cmd_eval(a, out),
        Simulate(a) => commands::cmd_simulate(a, out),
        Diagnose(a) => commands::cmd_diagnose(a, out),
        FitDensity(a) => commands::cmd_fit_density(a, out),
        Plotdata(a) => commands::cmd_plotdata(a, out),
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
