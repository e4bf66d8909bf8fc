use thiserror::Error;

/// Errors raised across the simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("shape mismatch: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("kernel violates causality: entry ({row}, {col}) = {value} must vanish")]
    Acausal { row: usize, col: usize, value: f64 },
    #[error("propagator must be strictly causal (no same-time self-action)")]
    SameTimeSelfAction,
    #[error("covariance is not positive semidefinite (min eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("integral diverges: {0}")]
    Divergent(String),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("duplicate device id {0}")]
    DuplicateDevice(u64),
    #[error("length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("Fock cutoff {n_max} too small: truncated population {truncated:e}")]
    CutoffInsufficient { n_max: usize, truncated: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
