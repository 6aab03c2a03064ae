//! Streaming network service detection.
//!
//! Packets are decomposed into per-conversation flows, summarized every
//! 500 ms into ten statistics, windowed into 60-value vectors and classified
//! by a two-level hierarchy of gradient-boosted tree models (CG / RT / NRT,
//! then MG / VC / AC under RT and FD / VS under NRT). Per-conversation
//! majority voting and sensor hints smooth the raw predictions.

pub mod cli;
pub mod config;
pub mod decompose;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gbdt;
pub mod pipeline;
pub mod postprocess;
pub mod synth;
pub mod traffic;
pub mod window;

pub use error::{Error, Result};
