//! Dense tensors, reverse-mode autodiff, AdamW, and the learning-rate schedule.

mod attention;
mod gradcheck;
pub(crate) mod ops;
mod optim;
mod rng;
mod scalar;
mod schedule;
mod tape;
mod tensor;

pub use attention::{AttnShape, Mask};
pub(crate) use attention::attention_forward as attention_kernel;
pub use gradcheck::{central_difference, grad_check};
pub use ops::{cross_entropy, matmul, rms_norm, softmax_rows};
pub use optim::{adamw_step, AdamW, AdamWState};
pub use rng::{derived_rng, gaussian_init, seeded_rng, LabRng, RngState};
pub use scalar::Scalar;
pub use schedule::{cosine_schedule, ScheduleConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
