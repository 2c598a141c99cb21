use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid sketch distribution: {0}")]
    InvalidDistribution(String),

    #[error("sketch support has {count} members, above the limit of {limit}")]
    SupportTooLarge { count: u128, limit: u128 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("missing constant: {0}")]
    MissingConstant(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("divergence detected at iteration {t} (|x| = {norm:e})")]
    Divergence { t: u64, norm: f64 },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("split fractions must be positive and sum to 1 (sum = {0})")]
    InvalidFractions(f64),

    #[error("empty index set")]
    EmptyIndex,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("iteration cap of {iterations} reached with squared gradient norm {grad_norm_sq:e}")]
    IterationCap { iterations: u64, grad_norm_sq: f64 },
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
