//! Encoder-only multi-task speech-to-text with self-conditioned CTC.

pub mod ctc;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod infer;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
