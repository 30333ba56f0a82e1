//! Dense tensors, the closed kernel set used by the model and the losses,
//! reverse-mode gradients for all of them, and a finite-difference checker.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, relative_error, GradReport, InputReport, REL_ERR_FLOOR};
pub use kernels::{cosine_distance, masked_softmax};
pub use tape::{AttentionLayout, Gradients, Tape, Var};
pub use tensor::{gemm, MatMut, MatRef, Real, Tensor};
