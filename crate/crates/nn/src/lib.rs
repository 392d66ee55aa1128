//! Minimal dense autodiff used by the ddn-lab models.
//!
//! Everything runs in `f64` so finite-difference gradient checks are
//! meaningful at `h = 1e-5`. Checkpoints are written at `f32` precision.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Grads, ParamId, ParamSet};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
