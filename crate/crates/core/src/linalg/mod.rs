//! Dense row-major matrices, the NNLS solver and percentile ranks.

mod matrix;
mod nnls;
mod rank;

pub use matrix::{frobenius_dot, matmul, Matrix};
pub use nnls::{nnls_solve, NnlsSolution};
pub use rank::percentile_rank;
