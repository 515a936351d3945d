use thiserror::Error;

/// Errors produced by the numerical pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected} {what}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("Morse condition violated: V''(0) = {v2} (must be < -{tol:e})")]
    MorseViolation { v2: f64, tol: f64 },

    #[error("q = 0 is not the unique maximum of V: V({q}) - V(0) = {excess:e}")]
    NotUniqueMaximum { q: f64, excess: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("requested tolerance {tol:e} unreachable; best error estimate {best:e}")]
    AccuracyError { tol: f64, best: f64 },

    #[error("point ({0}) outside branch domain")]
    OutsideDomain(String),

    #[error(
        "critical-point search failed: best gradient norm {best_grad:e} > required {required:e}"
    )]
    SearchFailure { best_grad: f64, required: f64 },

    #[error("repair failure: {0}")]
    RepairFailure(String),

    #[error("excursion did not return to the section within the time cap {cap}")]
    ExcursionFailure { cap: f64 },

    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
