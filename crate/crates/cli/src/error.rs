use std::path::PathBuf;

use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_VERIFICATION: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("solver failed: {0}")]
    Solver(tieq_core::Error),

    #[error("cannot read solution {path}: {message}")]
    Solution { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Solution { .. } => EXIT_CONFIG,
            CliError::Solver(_) => EXIT_SOLVER,
            CliError::Io { .. } => EXIT_IO,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<tieq_core::Error> for CliError {
    fn from(e: tieq_core::Error) -> Self {
        use tieq_core::Error as E;
        match e {
            E::InvalidGrid(_)
            | E::DimensionMismatch(_)
            | E::InvalidParameter(_)
            | E::OriginNotFeasible(_)
            | E::SingularSigma { .. }
            | E::OutOfRange { .. }
            | E::GExposureMissing => CliError::Config(e.to_string()),
            other => CliError::Solver(other),
        }
    }
}
