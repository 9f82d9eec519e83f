//! Dense numeric kernels: matrices, a reverse-mode gradient tape, and the
//! Jacobi-based factorizations the correlation analysis needs.

pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod matrix;

pub use graph::{gelu, Graph, NodeId};
pub use linalg::{inv_sqrt_from_eig, svd, sym_eig, sym_inv_sqrt};
pub use matrix::Matrix;
