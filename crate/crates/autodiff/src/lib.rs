//! Dense `f64` tensors with a define-by-run reverse-mode tape.

mod error;
mod gradcheck;
pub mod linalg;
pub mod special;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{BinaryKind, Gradients, Tape, UnaryKind, Var};
pub use tensor::Tensor;
