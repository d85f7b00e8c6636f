//! Desk-scale dual-path mixture-of-experts multimodal transformer.
//!
//! The crate builds everything from first principles on a dense `f64`
//! tensor core with reverse-mode autodiff: a frozen-anchor MoE layer with
//! top-k routing and a load-balancing penalty, a small multimodal causal
//! transformer (patch embedding, 2×2 token merging, MLP projector), low-rank
//! adapters, a two-stage training harness, a streaming near-duplicate
//! filter for instruction corpora (ROUGE-L and simhash gates), and the
//! n-gram evaluation metrics used to score generated text.
//!
//! Inner loops that are data-parallel run on rayon when the default
//! `parallel` feature is enabled; a sequential fallback produces bitwise
//! identical results when it is not.

pub mod error;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod oracle;
pub mod par;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod textpipe;

pub mod checkpoint;
pub mod lora;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
