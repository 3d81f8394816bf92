//! Error taxonomy shared across the crate.

use std::fmt;

/// Crate-wide error type. Variants map onto the failure classes the
/// operations distinguish: bad arguments, bad call ordering, numeric
/// blow-ups, degenerate inputs, and run-level failures.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Arguments violate a precondition (shape mismatch, out-of-range value).
    InvalidInput(String),
    /// Operation called in a state that does not permit it.
    InvalidState(String),
    /// NaN or infinity encountered where finite values are required.
    Numeric(String),
    /// A required prior step has not run (e.g. backward before forward).
    State(String),
    /// Resource already claimed (e.g. double-mounting an adapter).
    Conflict(String),
    /// Input is structurally valid but carries no usable signal
    /// (all-zero profile, zero-variance representations).
    Degenerate(String),
    /// A training run failed (divergence, missing artifact).
    RunFailure(String),
    /// Filesystem or encoding problem.
    Io(String),
    /// Malformed config or serialized artifact.
    Format(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(m) => write!(f, "invalid input: {m}"),
            Error::InvalidState(m) => write!(f, "invalid state: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Conflict(m) => write!(f, "conflict: {m}"),
            Error::Degenerate(m) => write!(f, "degenerate input: {m}"),
            Error::RunFailure(m) => write!(f, "run failure: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
