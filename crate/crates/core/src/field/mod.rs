//! Fourier representations of fields on the torus and on time grids.

mod fourier;
mod grid;
mod lattice;
mod norm;

pub use fourier::FourierField;
pub use grid::{GridField, GridRecord};
pub use lattice::{compose_near_identity, Lattice, PointBasis};
pub use norm::{analytic_norm, holder_norm, sup_norm, vector_norm, weighted_time_norm, NormKind, NormSpec};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("band {needed} exceeds the cap {cap}")]
    BandOverflow { needed: usize, cap: usize },
    #[error("axis {axis} out of range for dimension {dim}")]
    AxisOutOfRange { axis: usize, dim: usize },
    #[error("field is not real-valued (conjugate symmetry broken by {0:e})")]
    NotRealValued(f64),
    #[error("invalid mode: {0}")]
    InvalidMode(String),
    #[error("displacement too large for a near-identity composition: sup|u| = {0}")]
    NotNearIdentity(f64),
    #[error("norm out of numeric range: {0}")]
    NumericRange(String),
    #[error("invalid norm parameter: {0}")]
    InvalidNorm(String),
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("time {t} lies before the grid start {start}")]
    OutOfGrid { t: f64, start: f64 },
}

pub type Result<T> = std::result::Result<T, FieldError>;
