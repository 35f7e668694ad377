//! Dually sparsity-embedded efficient tuning.
//!
//! Pretrained weight matrices are decomposed into a low-rank part plus a
//! sparse residual; the residual's support seeds a trainable update
//! `ΔW = U V + S₂` whose sparse term is confined to that support. The
//! pretrained weights are then pruned (per-entry magnitude masks or whole
//! attention heads) and the update is tuned again to recover accuracy.
//!
//! Module map:
//! - [`linalg`]: dense kernels and randomized rank-r factorization
//! - [`decompose`]: sparse-plus-low-rank solver and support selection
//! - [`adapter`]: the sparse low-rank update, masks, forward and merge
//! - [`model`]: a small transformer encoder with head gates and exact gradients
//! - [`pruning`]: global magnitude masks and head/FFN structured pruning
//! - [`pipeline`]: optimizer, synthetic tasks, and the staged procedure
//! - [`accounting`]: parameter counts, FLOPs estimates, weight-change histograms
//! - [`archive`]: the binary tensor archive and model checkpoints

pub mod accounting;
pub mod adapter;
pub mod archive;
pub mod decompose;
pub mod error;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod pruning;

pub use error::{Error, Result};
