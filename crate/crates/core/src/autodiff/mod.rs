//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Build a [`Graph`] per forward pass, call [`Graph::backward`] on a scalar,
//! then read leaf gradients back. Model parameters live in a [`ParamStore`]
//! and are bound onto each graph as trainable leaves.

mod check;
pub mod checkpoint;
mod graph;
mod optim;
mod params;
mod tensor;

pub use check::{grad_check, grad_check_many};
pub use graph::{Graph, Var, ACT_SLOPE, LAYER_NORM_EPS};
pub(crate) use graph::logsumexp;
pub use optim::{step_decay, AdamW};
pub use params::{sum_grads, ParamEntry, ParamId, ParamStore};
pub use tensor::Tensor;
