use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape of an input does not match what the operation expects.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// An input violates a structural invariant (symmetry, definiteness, rank, range).
    #[error("invalid input: {0}")]
    Invalid(String),
    /// The embedded conic solver failed to produce a usable certificate.
    #[error("solver: {0}")]
    Solver(String),
    /// The problem instance was detected to be infeasible (or unbounded).
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    /// Scenario files or serialized problems that fail to parse or validate.
    #[error("parse: {0}")]
    Parse(String),
    /// A runtime consistency check on a numerical invariant failed.
    #[error("numerical check failed: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
