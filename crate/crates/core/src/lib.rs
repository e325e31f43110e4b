//! Latent diffusion with a ViT encoder-decoder denoiser.
//!
//! The crate is self-contained: a small reverse-mode autograd engine
//! ([`tensor`]), the DDPM machinery ([`diffusion`]), the class-conditioned
//! transformer ε-predictor ([`vit`]), a pixel/latent codec ([`codec`]), a
//! procedural shape dataset ([`data`]) and a Fréchet-distance evaluator
//! ([`metrics`]). [`train`] and [`eval`] wire them into the training,
//! sampling and evaluation pipelines used by the `ldt` binary.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod diffusion;
mod error;
pub mod eval;
pub mod metrics;
pub mod ppm;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
