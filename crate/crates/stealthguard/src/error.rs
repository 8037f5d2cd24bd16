use thiserror::Error;

/// Failure modes shared by every analysis stage.
#[derive(Debug, Error)]
pub enum Error {
    /// Inputs violate a documented precondition (dimensions, ranges, PSD checks).
    #[error("invalid input: {0}")]
    Validation(String),
    /// The pair (A, C) is not observable.
    #[error("structural: {0}")]
    Unobservable(String),
    /// A probability argument falls outside the calibration domain.
    #[error("outside calibration domain: {0}")]
    Domain(String),
    /// Iterative solver or factorization failure.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Policy synthesis found no safe period.
    #[error("no feasible policy: {0}")]
    NoFeasiblePolicy(String),
    #[error("model file: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Unobservable(_) | Error::Domain(_) | Error::Schema(_) | Error::Io(_) => 2,
            Error::Numerical(_) => 3,
            Error::NoFeasiblePolicy(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
