use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Where and why the filter recursion stopped producing usable numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    /// Global 1-based index of the observation being processed.
    pub k: usize,
    pub y: f64,
    pub quantity: String,
}

impl fmt::Display for Breakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "filter breakdown at k={} (y={}): {}", self.k, self.y, self.quantity)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("price at index {index} is not strictly positive ({value})")]
    NonPositivePrice { index: usize, value: f64 },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("power iteration did not converge (residual {residual:e})")]
    StationaryNotConverged { residual: f64 },

    #[error("position {position} outside 1..={len}")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("gamma for state {state} at y={y} is not finite ({value})")]
    Gamma { state: usize, y: f64, value: f64 },

    #[error("likelihood ratio at y={y} is not finite")]
    NonFiniteLambda { y: f64 },

    #[error("{0}")]
    Breakdown(Breakdown),

    #[error("root not bracketed: f({lo})={f_lo}, f({hi})={f_hi}")]
    Bracket { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },

    #[error("all weights are zero")]
    ZeroWeights,

    #[error("instance too large for enumeration: {paths} paths")]
    InstanceTooLarge { paths: f64 },

    #[error("mixture fit degenerate in every restart; try fewer components")]
    DegenerateFit,

    #[error("negative variance radicand {value:e} for state {state}")]
    NegativeRadicand { state: usize, value: f64 },

    #[error("least-favorable density does not integrate to one (residual {residual:e})")]
    InconsistentRho { residual: f64 },

    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn as_breakdown(&self) -> Option<&Breakdown> {
        match self {
            Error::Breakdown(b) => Some(b),
            _ => None,
        }
    }
}
