//! Cross-lingual alignment of transformer sentence embeddings for
//! intent classification and slot filling, on a small reverse-mode autodiff
//! engine.

pub mod data;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod optim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
