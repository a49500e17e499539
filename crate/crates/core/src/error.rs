use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point {point:?} lies outside the active window (dimension {dim}, allowed [{lo}, {hi}])")]
    OutOfDomain {
        point: Vec<f64>,
        dim: usize,
        lo: f64,
        hi: f64,
    },

    #[error("integrand returned a non-finite value at quadrature node {node:?}")]
    NonFinite { node: Vec<f64> },

    #[error("unknown problem `{name}`; valid names are: {}", valid.join(", "))]
    UnknownProblem { name: String, valid: Vec<String> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("Picard iteration did not converge at level {level}, point {point:?} after {iterations} iterations")]
    Divergence {
        level: usize,
        point: Vec<f64>,
        iterations: usize,
    },

    #[error("non-finite value produced at level {level}, point {point:?}")]
    NonFiniteValue { level: usize, point: Vec<f64> },

    #[error("window sizing bug at level {level}: {source}")]
    WindowSizing {
        level: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True for failures that mean the numerical scheme blew up rather than
    /// a configuration or programming problem.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::NonFiniteValue { .. } | Error::NonFinite { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
