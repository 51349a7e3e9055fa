use thiserror::Error;

use crate::types::TokenId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("token id {token} out of range for vocabulary of size {size}")]
    TokenOutOfRange { token: TokenId, size: usize },

    #[error("position {position} out of range (generated length {len})")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("reward {reward} outside quantile table range [{low}, {high}]")]
    RewardOutOfRange { reward: f64, low: f64, high: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("pool entry {0} has no shaped reward")]
    MissingShapedReward(usize),

    #[error("trajectory is missing annotations: {0}")]
    MissingAnnotation(&'static str),

    #[error("horizon exceeded: prefix length {len} > horizon {horizon}")]
    HorizonExceeded { len: usize, horizon: usize },

    #[error("non-finite objective value at parameter {0}")]
    NonFinite(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
