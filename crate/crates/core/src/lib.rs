//! Event-guided deblurring toolkit for 3D Gaussian splatting.
//!
//! The crate covers blur decoupling from events, confidence-balanced seed
//! sampling, SE(3) latent trajectories, a differentiable CPU splat renderer,
//! pointmap alignment, the coarse+fine training loop and evaluation metrics.

pub mod alignment;
pub mod error;
pub mod events;
pub mod geometry;
pub mod image;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod sampling;
pub mod splat;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use image::Image;
