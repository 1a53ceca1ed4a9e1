use thiserror::Error;

/// Errors produced by fitting, prediction and simulation routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("delta {delta} is below 1/(n+1) = {min} for {n} calibration scores")]
    DeltaTooSmall { delta: f64, n: usize, min: f64 },

    #[error("delta {0} must lie in (0, 1)")]
    DeltaInvalid(f64),

    #[error("no scores to select from")]
    EmptyScores,

    #[error("every scale estimate is zero")]
    AllScalesZero,

    #[error("bad split: {0}")]
    BadSplit(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid correlation {rho} for dimension {d}")]
    InvalidCorrelation { rho: f64, d: usize },

    #[error("infeasible action: cost {cost} exceeds budget {budget}")]
    InfeasibleAction { cost: f64, budget: f64 },

    #[error("no feasible action under budget {0}")]
    NoFeasibleAction(f64),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("schema mismatch: {0}")]
    Schema(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Error::Io(e.to_string())
        } else {
            Error::Schema(e.to_string())
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
