//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by the solvers, the controllers and the scenario layer.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain on which a quantity is defined.
    #[error("domain error: {0}")]
    Domain(String),
    /// A configuration is inconsistent (grid, time step, dimensions).
    #[error("configuration error: {0}")]
    Config(String),
    /// One or more validation failures, all reported at once.
    #[error("validation failed:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),
    /// A root finder or quadrature could not reach its tolerance.
    #[error("numerical failure: {0}")]
    Numeric(String),
    /// No admissible equilibrium exists for the requested parameters.
    #[error("infeasible equilibrium: {0}")]
    Infeasible(String),
    /// The state cannot be mapped to reduced coordinates.
    #[error("transform domain error: {0}")]
    Transform(String),
    /// An internal invariant (for example positivity) was violated.
    #[error("invariant violated at t = {t}, age = {age}, compartment {compartment}: {message}")]
    Invariant {
        t: f64,
        age: f64,
        compartment: usize,
        message: String,
    },
    /// Filesystem failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// CSV reading or writing failure.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    /// JSON reading or writing failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    /// Scenario parsing failure.
    #[error("parse error: {0}")]
    Parse(String),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
