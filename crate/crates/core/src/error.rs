use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("basis capacity exceeded: {0}")]
    Capacity(String),

    #[error("bitmask {mask:#b} is not in the basis")]
    NotInBasis { mask: u64 },

    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),

    #[error("time {t} us is outside the waveform domain [{start}, {end}]")]
    OutOfDomain { t: f64, start: f64, end: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("integration failed at t = {t} us (step {step:e} us): {reason}")]
    Integration { t: f64, step: f64, reason: String },

    #[error("eigensolver did not converge after {iterations} iterations (residual {residual:e})")]
    Eigensolver { iterations: usize, residual: f64 },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("invalid ZNE grid: {0}")]
    InvalidGrid(String),

    #[error("invalid readout model: {0}")]
    InvalidModel(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
