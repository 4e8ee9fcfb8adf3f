//! Dense linear algebra and spectral primitives.
//!
//! Everything here is a pure function of its inputs. Matrix norms are
//! Frobenius unless stated otherwise.

mod eigen;
mod matrix;
mod solve;
mod spectral;

use thiserror::Error;

pub use eigen::{
    eigenvalues, is_positive_stable, min_real_part, symmetric_eigen, Eigenvalue, SymmetricEigen,
};
pub use matrix::{DenseMatrix, DenseVector};
pub use solve::{inverse, solve_linear, solve_many, PIVOT_RTOL};
pub use spectral::{
    frobenius_norm, second_singular_value, spectral_norm_bound_check, POWER_ITERATION_CAP,
    ZERO_MEAN_TOL,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("expected {expected} entries, got {got}")]
    InvalidData { expected: usize, got: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is singular or near-singular at pivot {pivot}")]
    Singular { pivot: usize },
    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
}
