//! Double-precision tensors with a define-by-run reverse-mode tape.

mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, sample_coordinates, GradCheckReport};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::{log_softmax_lastdim, logsumexp_lastdim, softmax_lastdim, Tensor};

pub(crate) use tensor::log_add;

#[cfg(test)]
mod tests;
