//! Group-wise reparameterized vector quantization.

pub mod analysis;
pub mod autoencoder;
pub mod cli;
pub mod codebook;
pub mod error;
pub mod numerics;
pub mod quantizer;
pub mod resampler;
pub mod trainer;

pub use error::{Error, Result};
