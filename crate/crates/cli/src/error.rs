//! CLI-level error type mapping every failure onto a process exit code.
//!
//! * 2 — configuration problems: bad flags, malformed config files,
//!   inconsistent checkpoint metadata,
//! * 3 — data problems: missing or corrupt dataset files, I/O failures,
//! * 4 — numerical failures: diverged training, non-finite objectives,
//!   infeasible search brackets, violated bounds.

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numerical error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<wcq_core::Error> for CliError {
    fn from(e: wcq_core::Error) -> Self {
        use wcq_core::Error as E;
        match &e {
            E::Io(_) => CliError::Data(e.to_string()),
            E::Divergence(_)
            | E::NonFiniteObjective { .. }
            | E::InfeasibleLowerBound { .. }
            | E::BoundViolation(_) => CliError::Numeric(e.to_string()),
            E::ShapeMismatch { .. } | E::InvalidArgument(_) | E::BadCheckpoint(_) => {
                CliError::Config(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
