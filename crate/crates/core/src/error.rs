use num_complex::Complex64;
use thiserror::Error;

use crate::sim::Aggregate;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// No polynomial root satisfied the branch condition.
    #[error("no admissible root at z = {z}; candidates: {candidates:?}")]
    NoRoot {
        z: Complex64,
        candidates: Vec<Complex64>,
    },

    #[error("refinement did not converge; coarse-grid argmin eta = {coarse_eta}")]
    NotConverged { coarse_eta: f64 },

    #[error("eigenvalue pairing failed: {0}")]
    Pairing(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A Monte-Carlo trial failed. `partial` pools every trial with a
    /// smaller index that completed.
    #[error("trial {trial} failed: {source}")]
    Trial {
        trial: u64,
        #[source]
        source: Box<Error>,
        partial: Option<Box<Aggregate>>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for configuration problems as opposed to numerical ones.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Domain(_) => true,
            Error::Trial { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
