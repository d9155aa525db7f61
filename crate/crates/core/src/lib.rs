//! Conditional auto-regressive generation over integrated quantized latents.
//!
//! The pipeline has two stages. An [`vae::IqVae`] learns paired encoders,
//! codebooks and a decoder for images and their condition maps, with a
//! sliced Gromov-Wasserstein regularizer tying the two latent geometries
//! together. A causal transformer ([`ar::ArModel`]) then models image tokens
//! given condition tokens, optionally trained with reliability-gated Gumbel
//! scheduled sampling ([`gumbel`]).

pub mod ar;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gumbel;
mod io;
pub mod ot;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
