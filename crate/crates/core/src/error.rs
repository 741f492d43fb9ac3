//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sample rate mismatch: expected {expected} Hz, got {got} Hz")]
    SampleRate { expected: u32, got: u32 },

    #[error("channel mismatch: expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("variant mismatch: expected {expected}, found {found}")]
    VariantMismatch { expected: String, found: String },

    #[error("cache error: {0}")]
    Cache(String),

    #[error("audio error: {0}")]
    Audio(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the CLI: usage/config problems exit 2, runtime failures 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::VariantMismatch { .. } => 2,
            _ => 1,
        }
    }
}
