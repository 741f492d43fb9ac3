//! Latent-space restructuring for a small frozen audio VAE.
//!
//! The pipeline: a toy MDCT-domain variational autoencoder compresses mono
//! audio into a channel-by-frame latent sequence; a compact inner
//! autoencoder (the re-encoder) is then trained entirely inside that latent
//! space with reconstruction, adversarial, feature-matching and KL terms,
//! plus one optional structural objective (channel ordering, semantic
//! alignment, or filtering equivariance). The evaluation suite measures what
//! structure the inner bottleneck actually acquired.

pub mod audio;
pub mod autodiff;
pub mod cache;
pub mod codec;
pub mod datagen;
pub mod discriminator;
pub mod dsp;
pub mod error;
pub mod evalsuite;
pub mod io;
pub mod losses;
pub mod nn;
pub mod reencoder;
pub mod trainer;
pub mod variants;

pub use error::{Error, Result};
