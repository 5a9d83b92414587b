//! Command-line surface of fracinfer: configuration, CSV input and report output.

pub mod commands;
pub mod config;
pub mod io;

use std::fmt;

/// Exit codes: 2 configuration or input error, 3 numeric failure, 4 unreliable score.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Config(String),
    Parse(String),
    Io(String),
    Lib(fracinfer::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use fracinfer::Error as E;
        match self {
            CliError::Config(_) | CliError::Parse(_) | CliError::Io(_) => 2,
            CliError::Lib(E::Argument(_) | E::Capability(_)) => 2,
            CliError::Lib(E::UnreliableScore { .. }) => 4,
            CliError::Lib(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(s) => write!(f, "config error: {s}"),
            CliError::Parse(s) => write!(f, "parse error: {s}"),
            CliError::Io(s) => write!(f, "i/o error: {s}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<fracinfer::Error> for CliError {
    fn from(e: fracinfer::Error) -> Self {
        CliError::Lib(e)
    }
}
