//! Single-image dehazing by recursive residual learning with adversarial
//! training and guided-filter halo suppression.

pub mod checkpoint;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod guided;
pub mod haze;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{DehazeError, Result};
pub use image::{Image, Plane};
