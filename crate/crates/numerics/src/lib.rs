//! Dense row-major tensors, a reverse-mode tape, and an Adam optimizer.
//!
//! Every trainable model in the workspace is written against [`Tape`]. Model
//! code is generic over [`Float`] so the same forward pass runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod adam;
mod error;
mod float;
mod grad;
mod params;
mod rng;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use error::{NumericsError, Result};
pub use float::Float;
pub use grad::{finite_diff_grad, relative_error, value_and_grad, GradMap};
pub use params::ParamStore;
pub use rng::{derive_seed, seeded_rng, Rng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
