//! Deep-compression autoencoder built around non-parametric space-to-channel
//! shortcuts, with a three-phase training pipeline and a small latent
//! diffusion harness for end-to-end checks.

pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod model;
pub mod shuffle;
pub mod tensor;
pub mod train;

pub use error::{DcaeError, Result};
