//! Dense matrix kernels and SPD covariance geometry.
//!
//! Everything here runs in 64-bit floats, independent of the 32-bit network.
//! The Riemannian operations use the affine-invariant metric, which makes
//! distances invariant and Karcher means equivariant under congruence
//! `C ↦ Wᵀ C W`.

mod matrix;
mod spd;

pub use matrix::Matrix;
pub use spd::{
    airm_distance, covariance, geodesic_step, geometric_mean, karcher_mean, spd_log, spd_power,
    sqrt_and_inv_sqrt, sym_eig, sym_exp, SpdMatrix, SymEig, KARCHER_MAX_ITER, KARCHER_TOL,
    MAX_CONDITION, SHRINKAGE, SYMMETRY_TOL,
};

pub(crate) use spd::airm_distance_whitened;

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LinalgError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is not symmetric (relative asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("degenerate matrix: smallest eigenvalue {min_eigenvalue:.3e}")]
    Degenerate { min_eigenvalue: f64 },
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("domain error: {0}")]
    Domain(String),
}
