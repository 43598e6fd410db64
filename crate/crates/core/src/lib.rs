//! Pipeline for generating and evaluating synthetic RF modulation data:
//! deterministic I/Q corpus synthesis, a VQ-VAE with a stochastic vector
//! quantizer, a class-conditioned decoder-only transformer over the discrete
//! latents, and fidelity/diversity/classifier evaluation.

pub mod adam;
pub mod error;
pub mod kde;
pub mod kernels;
pub mod rng;
pub mod tape;
pub mod tensor;

pub mod artifact;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod dot;
pub mod eval;
pub mod modulation;
pub mod tokens;
pub mod vqvae;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
