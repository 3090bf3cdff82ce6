//! Transformer estimating `p(s_0 | s_t)` over codebook tokens.

mod config;
mod net;
mod train;

pub use config::{ConditionMode, DenoiserConfig};
pub use net::{attention_weights, sinusoid, DenoiserNet, NetInput, DENOISER_CKPT, DENOISER_SIDECAR};
pub use train::{train_denoiser, DenoiserTrainConfig, DenoiserTrainReport};
