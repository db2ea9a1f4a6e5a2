//! Dense f32 tensors with a tape-based reverse-mode autodiff engine.
//!
//! Values are stored in 32 bits; reductions (sums, means, softmax
//! normalizers, layer-norm statistics and losses) accumulate in 64 bits.
//! All kernels run on the calling thread with a fixed evaluation order, so
//! forward and backward passes are bit-reproducible.

mod error;
pub mod gradcheck;
mod init;
pub mod kernels;
mod optim;
mod real;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use init::truncated_normal;
pub use optim::{adam_step, AdamConfig, AdamState};
pub use real::Real;
pub use tape::{Gradients, Tape, Var, BCE_EPS};
pub use tensor::Tensor;
