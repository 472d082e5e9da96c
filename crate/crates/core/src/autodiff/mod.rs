//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.

pub mod checkpoint;
pub mod gradcheck;
mod linalg;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{adam_step, adam_step_store, clip_grad_l2, AdamConfig, AdamState};
pub use params::{GradStore, Param, ParamId, ParamStore};
pub use tape::{
    sigmoid, Activation, BinaryKind, CustomOp, Gradients, RunningStats, Tape, UnaryKind, Var, BN_EPS,
    BN_MOMENTUM, LEAKY_SLOPE,
};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
