//! Error type shared by every module of the toolkit.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("multiplier is not finite at frequency {frequency:?}")]
    NonFiniteMultiplier { frequency: Vec<f64> },

    #[error("symbol gradient vanishes (|grad p| = {norm:e}) in direction {direction:?}")]
    DegenerateGradient { direction: Vec<f64>, norm: f64 },

    #[error(
        "inverse map did not converge in direction {direction:?} after {iterations} iterations \
         (residual {residual:e})"
    )]
    InversionFailed { direction: Vec<f64>, iterations: usize, residual: f64 },

    #[error("sample grid too coarse along axis {axis}: {points} points, need at least {required}")]
    GridTooCoarse { axis: usize, points: usize, required: usize },

    #[error("refusing dense evaluation: estimated cost {cost:.3e} exceeds limit {limit:.3e} ({reason})")]
    TooExpensive { cost: f64, limit: f64, reason: String },

    #[error("translates do not form a partition of unity: sum {sum} at point {point:?}")]
    PartitionOfUnity { point: Vec<f64>, sum: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
