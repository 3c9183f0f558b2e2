//! Progressive adversarial VAE for conditional 3D lesion synthesis.
//!
//! Two VAE-GAN stages: a mask network whose decoder is conditioned on lesion
//! size, and a lesion network whose decoder is guided voxelwise by a mask.
//! Around them sit phantom data, training and sampling loops, compositing,
//! a downstream segmentation experiment, image and mask metrics, and a small
//! binary volume format.

pub mod conditioning;
pub mod config;
pub mod error;
pub mod experiments;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod sampling;
pub mod segment;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use pavae_autograd as autograd;
