use serde::Serialize;
use thiserror::Error;

/// Diagnostic attached to a halted simulation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceReport {
    /// Sample index at which the run stopped.
    pub sample: usize,
    pub reason: String,
    /// Error-signal magnitude that triggered the halt (may be non-finite).
    pub error_value: f64,
    pub threshold: f64,
}

/// Errors produced by the simulation library.
#[derive(Debug, Error)]
pub enum AncError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("causality violated: {0}")]
    Causality(String),

    #[error("bulk delay too small: {0}")]
    BulkDelayTooSmall(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("filter is not minimum phase (largest root magnitude {max_root:.9})")]
    NotMinimumPhase { max_root: f64 },

    #[error("simulation diverged at sample {}: {}", .0.sample, .0.reason)]
    Diverged(Box<DivergenceReport>),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("WAV error: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, AncError>;

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(AncError::Numerical(format!("{what}: non-finite value at index {i}"))),
        None => Ok(()),
    }
}
