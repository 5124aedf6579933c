//! Sequence-to-sequence speech recognition with a transformer encoder-decoder
//! whose position information comes from convolutional context: 2-D conv
//! blocks over log-mel features in the encoder and causal 1-D conv blocks
//! over previous tokens in the decoder.
//!
//! Everything runs on the small reverse-mode engine in [`tensor`].

pub mod audio;
pub mod cli;
pub mod config;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
