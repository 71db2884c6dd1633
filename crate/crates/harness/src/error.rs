use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("run diverged at env step {env_step}: {message}")]
    Diverged { env_step: u64, message: String },
    #[error(transparent)]
    Core(bro_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("plotting failed: {0}")]
    Plot(String),
}

impl HarnessError {
    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Core(bro_core::Error::Config(_)) => 2,
            HarnessError::Diverged { .. } => 3,
            HarnessError::Core(bro_core::Error::Diverged(_)) => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }
}

impl From<bro_core::Error> for HarnessError {
    fn from(e: bro_core::Error) -> Self {
        HarnessError::Core(e)
    }
}
