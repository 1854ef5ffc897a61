//! `btd` — bundle-specific tractogram distribution tractography pipeline.
//!
//! Subcommands generate synthetic phantoms, fit divergence-free polynomial
//! fields to peak volumes, trace streamlines, score tractograms, and run
//! whole experiment grids from a declarative JSON run file.
//!
//! Exit codes: 0 success, 2 usage error, 3 file/format error, 4 numerical
//! failure. Logs go to stderr; machine-readable output goes to files.

use std::process::ExitCode;

use clap::Parser;

mod commands;
mod experiment;
mod runconfig;

#[derive(Parser)]
#[command(
    name = "btd",
    version,
    about = "Bundle-specific tractogram distribution tractography"
)]
struct Cli {
    #[command(subcommand)]
    command: commands::Command,
}

/// Errors bubbled to the exit-code mapping.
#[derive(Debug)]
pub enum AppError {
    Usage(String),
    Lib(btd::Error),
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Usage(msg) => write!(f, "{msg}"),
            AppError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<btd::Error> for AppError {
    fn from(e: btd::Error) -> Self {
        AppError::Lib(e)
    }
}

impl AppError {
    fn usage(msg: impl Into<String>) -> Self {
        AppError::Usage(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            AppError::Usage(_) => 2,
            AppError::Lib(btd::Error::InvalidArgument(_)) => 2,
            AppError::Lib(btd::Error::Format(_)) | AppError::Lib(btd::Error::Io(_)) => 3,
            AppError::Lib(btd::Error::Degenerate(_)) => 4,
        }
    }
}

pub type AppResult<T> = Result<T, AppError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
