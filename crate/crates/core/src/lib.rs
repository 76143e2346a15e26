//! Patch-trained PixelCNN conditioned on a coordinate grid and a VAE latent
//! code, with sliding-window generation and image-quality metrics.

pub mod checkpoint;
pub mod conv;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod generation;
pub mod graph;
pub mod imageio;
pub mod losses;
pub mod network;
pub mod par;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
