//! Instant point-cloud previews: project a raw point cloud to an
//! exponential-intensity z-buffer and translate it to a shaded RGBA image
//! with a settings-conditioned U-Net.

pub mod datagen;
pub mod encoding;
mod error;
pub mod image;
pub mod io;
pub mod network;
pub mod pipeline;
pub mod projection;
pub mod training;

pub use error::{Error, Result};
