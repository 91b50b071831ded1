use std::path::PathBuf;

use datarater_core::Error as CoreError;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid input: {0}")]
    Input(String),

    /// An experiment finished but a required property does not hold.
    #[error("invariant failed: {0}")]
    Invariant(String),

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 config, 2 I/O and bad inputs, 3 invariant,
    /// 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io { .. } | CliError::Input(_) => 2,
            CliError::Invariant(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(CoreError::Config(_) | CoreError::Json(_)) => 1,
            CliError::Core(
                CoreError::Io { .. }
                | CoreError::Data(_)
                | CoreError::Checkpoint(_)
                | CoreError::EmptySequence(_),
            ) => 2,
            // Shape and graph errors are internal faults.
            CliError::Core(_) => 4,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Input(e.to_string())
    }
}
