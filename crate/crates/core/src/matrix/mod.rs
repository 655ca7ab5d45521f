//! Dense and compressed-sparse-row matrices in 64-bit arithmetic.

mod dense;
mod sparse;

pub use dense::DenseMatrix;
pub use sparse::SparseMatrix;
