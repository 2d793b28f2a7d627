//! Dense linear algebra, reverse-mode gradients, rank estimation, and the
//! finite-difference checker used as a test oracle.

pub mod gradcheck;
pub mod matrix;
pub mod rank;
pub mod tape;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use matrix::{elementwise_mul, matmul, Matrix};
pub use rank::{numerical_rank, DEFAULT_RANK_TOL};
pub use tape::{Gradients, Tape, Var};
