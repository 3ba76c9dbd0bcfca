//! KV-cache compression for vision-language attention traces.
//!
//! The pipeline measures layer sparsity from the post-vision slice of the
//! prompt's attention, turns it into per-layer cache budgets, scores prompt
//! tokens by the attention they receive from post-vision queries, and evicts
//! everything else. Evaluation and micro-benchmark harnesses sit alongside.

pub mod attention;
pub mod bench;
pub mod budget;
pub mod cli;
pub mod error;
pub mod eval;
pub mod scoring;
pub mod sparsity;
pub mod trace;

#[cfg(test)]
mod test_support;

pub use error::{Error, Result};
