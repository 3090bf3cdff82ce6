pub mod autodiff;
pub mod codec;
pub mod config;
mod binio;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod seed;
pub mod shape;

pub use error::{Error, Result};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
