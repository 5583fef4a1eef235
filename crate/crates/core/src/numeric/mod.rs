//! Dense 64-bit tensors with a small reverse-mode tape.

mod gradcheck;
pub mod io;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheck};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, sigmoid, sigmoid_scalar, softmax_rows, Tensor};
