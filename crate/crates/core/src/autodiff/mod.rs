//! Minimal reverse-mode differentiation over dense `f64` matrices.

mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, parameter_gradient_check, relative_error, ABS_FLOOR};
pub(crate) use gradcheck::{finite_difference_check_with, parameter_gradient_check_with};
pub use param::{Adam, Binder, ParamId, ParamStore, Parameter};
pub(crate) use tape::sigmoid_scalar;
pub use tape::{Gradients, OpKind, Tape, Var, LOG_FLOOR};
pub use tensor::Tensor;
