//! Dense tensors with a dynamic reverse-mode tape.

mod element;
mod error;
mod gradcheck;
pub mod suite;
pub mod kernels;
mod tape;
mod tensor;

pub use element::{gemm, Element, MatView};
pub use error::{Result, TensorError};
pub use gradcheck::{floored_relative_error, grad_check, grad_check_at, grad_check_floored, relative_error, GradCheckReport};
pub use kernels::Conv2dSpec;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{numel, Tensor};
