use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] mdgfm_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },
    #[error("stage `{stage}` failed (seed {seed}): {source}")]
    Stage {
        stage: &'static str,
        seed: u64,
        #[source]
        source: Box<Error>,
    },
}

/// Process exit status for a configuration problem.
pub const EXIT_CONFIG: i32 = 2;
/// Process exit status for unreadable or inconsistent data.
pub const EXIT_DATA: i32 = 3;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn at_stage(self, stage: &'static str, seed: u64) -> Self {
        Self::Stage {
            stage,
            seed,
            source: Box::new(self),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Core(mdgfm_core::Error::Config(_)) => EXIT_CONFIG,
            Self::Stage { source, .. } => source.exit_code(),
            _ => EXIT_DATA,
        }
    }
}
