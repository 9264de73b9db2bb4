//! Tensor math and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a dense row-major array over [`Scalar`] (`f32` in
//! production, `f64` for gradient checks). [`Tape`] records operations and
//! differentiates them in one reverse sweep; [`finite_difference_check`]
//! validates any scalar-valued graph numerically.

mod tape;
mod tensor;

pub use tape::{finite_difference_check, Gradients, Tape, Var};
pub use tensor::{layer_norm, matmul, softmax, Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{context}: shapes {lhs:?} and {rhs:?} are incompatible")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not match buffer of {data_len} elements")]
    InvalidShape { shape: Vec<usize>, data_len: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("{perm:?} is not a permutation of 0..{rank}")]
    InvalidPermutation { perm: Vec<usize>, rank: usize },
    #[error("{context}: rank {rank} below minimum {min}")]
    RankTooLow {
        context: &'static str,
        rank: usize,
        min: usize,
    },
    #[error("{context}: expected {expected} elements, got {got}")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{context}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("cross entropy saw no unmasked target positions")]
    NoValidTargets,
}
