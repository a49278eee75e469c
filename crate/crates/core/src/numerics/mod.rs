//! Dense linear algebra, seeded randomness and sampling primitives.

mod eigen;
mod matrix;
mod rng;
mod sampling;

pub use eigen::{sym_eig, SymEigResult, MAX_EIG_DIM};
pub use matrix::{axpy, dot, frobenius_norm, norm2, DenseMatrix};
pub use rng::{splitmix64, RngStream};
pub use sampling::{sample_gaussian, sample_sphere, sample_standard_gaussian, Covariance};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e} at scale {scale:e})")]
    NonSymmetric { asymmetry: f64, scale: f64 },
    #[error("dimension {dim} exceeds the supported maximum {max}")]
    DimensionTooLarge { dim: usize, max: usize },
    #[error("covariance is not positive semi-definite (eigenvalue {eigenvalue:e})")]
    NotPsd { eigenvalue: f64 },
    #[error("non-finite entry")]
    NonFinite,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
