//! Multi-modal music understanding and generation, desk scale.
//!
//! The crate assembles a complete pipeline: frozen feature encoders for
//! music, image, and video; trainable understanding adapters; a decoder-only
//! language model with gated modality injection and low-rank fine-tuning; an
//! output projector that conditions a small synthesizer; dataset builders;
//! audio analysis; and an evaluation suite. Everything runs in `f64` on the
//! CPU with seeded randomness, so runs are reproducible end to end.

pub mod adapter;
pub mod audio;
pub mod bridge;
pub mod config;
pub mod encoders;
pub mod error;
pub mod model;
pub mod projector;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
