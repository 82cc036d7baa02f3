use std::path::PathBuf;

/// Errors raised by the detector library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("symbol {value} at index {index} is outside the alphabet")]
    OutOfAlphabet { index: usize, value: i64 },

    #[error("matrix is rank deficient (|R[{index},{index}]| = {value:e})")]
    RankDeficient { index: usize, value: f64 },

    #[error("transition matrix for beta = {beta} has negative diagonal {value:e} at row {row}")]
    NegativeDiagonal { beta: f64, row: usize, value: f64 },

    #[error("search space of {size} candidates exceeds the brute-force limit")]
    TooLarge { size: f64 },

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("instance carries no ground-truth symbols")]
    MissingGroundTruth,

    #[error("no calibration entry within 1 dB of {snr_db} dB")]
    MissingCalibration { snr_db: f64 },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
