//! Zero-shot prompt ensembling over precomputed CLIP-style embeddings.
//!
//! Prompts are scored by their normalized max logit, optionally filtered by
//! a MAD z-score threshold, and combined into a weighted logit ensemble.

pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod prompt;
pub mod scoring;
pub mod synth;
pub mod tensor;
pub mod weighting;

pub use error::{Error, Result};
