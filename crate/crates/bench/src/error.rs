use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Core(#[from] mast_core::Error),

    #[error("{0} check(s) failed")]
    ChecksFailed(usize),
}

impl BenchError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// 1 for failed checks, 2 for configuration problems, 3 for IO.
    pub fn exit_code(&self) -> i32 {
        use mast_core::Error as E;
        match self {
            Self::ChecksFailed(_) => 1,
            Self::Config(_) => 2,
            Self::Io { .. } => 3,
            Self::Core(e) => match e {
                E::Config(_)
                | E::InvalidFractions(_)
                | E::InvalidDistribution(_)
                | E::MissingConstant(_)
                | E::Unsupported(_)
                | E::SupportTooLarge { .. }
                | E::Parse { .. }
                | E::EmptyDataset
                | E::DimensionMismatch { .. } => 2,
                _ => 1,
            },
        }
    }
}
