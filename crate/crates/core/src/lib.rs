//! Symbol-level recognition of printed math expression images.
//!
//! The pipeline segments an expression image into connected ink components,
//! embeds each 30x30 component patch together with its normalized position,
//! restores spatial dependencies with a transformer encoder whose attention
//! logits carry an additive pairwise position score, and transcribes the
//! encoded set into LaTeX tokens with an autoregressive transformer decoder.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod inspect;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod render;
pub mod segmentation;
pub mod synth;
pub mod token;
pub mod train;

pub use error::{Error, Result};
