//! Learned components: the joint-trajectory VAE, the frame-level grasp VAE,
//! temporal backbones and the latent diffusion model.

pub mod diffusion;
pub mod error;
pub mod jointvae;
pub mod layers;
pub mod manivae;
pub mod persist;
pub mod pipeline;
pub mod ssm;
pub mod train;

pub use error::{ModelError, Result};
