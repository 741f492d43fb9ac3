//! Signal-processing primitives: MDCT, STFT, mel scale, Gaussian filters.

pub mod filter;
pub mod mdct;
pub mod mel;
pub mod stft;
