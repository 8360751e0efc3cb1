//! The `anatomy` command line: argument parsing, subcommand dispatch and
//! exit-code mapping. Reports are written as JSON with a sidecar manifest.

pub mod commands;
pub mod json;
pub mod manifest;
pub mod svg;

use std::ffi::OsString;
use std::fmt;

use anatomy_core::AnatomyError;
use clap::error::ErrorKind;
use clap::Parser;

pub use commands::Cli;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(AnatomyError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_VALIDATION,
            CliError::Core(e) => match e {
                AnatomyError::Validation(_) | AnatomyError::InvalidArgument(_) => EXIT_VALIDATION,
                AnatomyError::Numeric { .. } => EXIT_NUMERIC,
                AnatomyError::Parse { .. } | AnatomyError::Format(_) | AnatomyError::Io(_) => EXIT_IO,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<AnatomyError> for CliError {
    fn from(e: AnatomyError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(AnatomyError::Io(e))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(AnatomyError::Io(std::io::Error::other(e)))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(AnatomyError::Io(std::io::Error::other(e)))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Sizes the global thread pool from `ANATOMY_THREADS`.
pub fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("ANATOMY_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("ANATOMY_THREADS must be a positive integer, got {raw:?}")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
/// Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_VALIDATION,
            };
            let _ = e.print();
            return code;
        }
    };
    match configure_threads().and_then(|_| commands::dispatch(cli.command)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
