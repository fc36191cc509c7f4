//! Layout-conditioned furniture synthesis: data pipeline, generator and
//! discriminator networks, adversarial training and image-quality metrics.

pub mod datapipe;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod imaging;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use nsd_layout as layout;
