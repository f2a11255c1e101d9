//! Dense arrays, the reverse-mode tape, gradient checking and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub use tape::{concat_cols, concat_rows, timestep_embedding, Gradients, Tape, Var};
pub use tensor::Tensor;
