//! Temporal-prior conditioning for patch-based forecasting on a frozen
//! decoder-only transformer.
//!
//! A small bank of learnable TS-tokens travels with the patch stream. At
//! selected decoder layers the TS-tokens (and only they) cross-attend to
//! embeddings of rendered calendar prompts, and self-attention carries that
//! context on to the patches. Everything except the patch embedder, the
//! TS-tokens, the conditioning modules and the output head stays frozen.

pub mod ablation;
pub mod backbone;
pub mod cli;
pub mod conditioning;
pub mod config;
pub mod error;
pub mod forecaster;
pub mod numerics;
pub mod prompts;
pub mod series;

pub use error::{Error, Result};
