//! One error kind for the driver binary.
//!
//! Subcommands stop early on three classes of failure: unusable
//! configuration, filesystem trouble while writing artifacts, and errors
//! raised by the library itself. All of them print as a single `error:` line
//! and exit with status 2 — distinct from status 1, which is reserved for
//! runs that complete but fail their numerical checks.

use std::fmt;

/// Anything that stops a subcommand before its checks can be reported.
#[derive(Debug)]
pub enum CliError {
    /// A bad flag value, config line or unsupported model key.
    Config(String),
    /// Filesystem failure while writing an artifact.
    Io(std::io::Error),
    /// Failure propagated from the library.
    Core(otbayes::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::Io(err) => write!(f, "{err}"),
            CliError::Core(err) => write!(f, "{err}"),
        }
    }
}

impl std::error::Error for CliError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CliError::Config(_) => None,
            CliError::Io(err) => Some(err),
            CliError::Core(err) => Some(err),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Io(err)
    }
}

impl From<otbayes::Error> for CliError {
    fn from(err: otbayes::Error) -> Self {
        CliError::Core(err)
    }
}
