use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("user {user} is {distance:.3} m from base station {bs}; minimum separation is 1 m")]
    Colocated { user: usize, bs: usize, distance: f64 },

    #[error("rate must be positive, got {0} bit/s (unreachable user)")]
    NonPositiveRate(f64),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("series of length {len} is too short for windows needing {needed} steps")]
    SeriesTooShort { len: usize, needed: usize },

    #[error("training diverged at epoch {epoch} (rmse = {rmse})")]
    TrainingDiverged { epoch: usize, rmse: f64 },

    #[error("action index {index} out of range for {count} actions")]
    InvalidAction { index: usize, count: usize },

    #[error("malformed state key: {0}")]
    MalformedKey(String),

    #[error("exhaustive search over {states} placements exceeds the enumeration cap of {cap}")]
    EnumerationTooLarge { states: String, cap: u64 },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
