//! Tensors, the differentiable tape, and finite-difference gradient checks.

pub mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{central_difference, finite_difference_check, max_relative_error};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
