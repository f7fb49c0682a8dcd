//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the SDO library.
///
/// Numerical failures carry enough context (iteration counts, residuals) to
/// diagnose a run without re-executing it; they are never silently swallowed.
#[derive(Debug, Error)]
pub enum SdoError {
    /// Vector/operator dimensions do not line up.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A scalar parameter is outside its precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Conjugate gradient failed to reach the requested tolerance.
    #[error("conjugate gradient did not converge: {iterations} iterations, relative residual {residual:.3e} (tol {tol:.3e})")]
    CgNoConvergence {
        iterations: usize,
        residual: f64,
        tol: f64,
    },

    /// A matrix factorization failed.
    #[error("matrix numerically singular: {0}")]
    Singular(String),

    /// Numerical quadrature could not deliver the requested accuracy.
    #[error("quadrature failure: {0}")]
    Quadrature(String),

    /// A non-finite value appeared where finite arithmetic was required.
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    /// Training data carried no usable variance.
    #[error("degenerate training data: {0}")]
    DegenerateData(String),

    /// Malformed on-disk artifact (phantom file, score CSV, …).
    #[error("format error: {0}")]
    Format(String),

    /// Invalid study configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Filesystem failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl SdoError {
    /// True for errors caused by bad user input (config, file formats) as
    /// opposed to numerical trouble; the CLI maps the two classes to
    /// different exit codes.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            SdoError::Config(_) | SdoError::Format(_) | SdoError::InvalidParameter(_)
        )
    }
}
