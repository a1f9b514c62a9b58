//! Dense matrices and a reverse-mode differentiation tape.
//!
//! The tape records whole-matrix operations (matmul, dilated convolution,
//! elementwise nonlinearities, row reductions) rather than scalars, which
//! keeps a forward pass over a few hundred frames at a few hundred nodes.

mod fd;
pub mod hyperbolic;
mod matrix;
mod tape;

pub use fd::finite_diff_check;
pub use matrix::Matrix;
pub use tape::{Gradients, Tape, Var};
