//! Sparse all-MLP language models: spatial gating units, token- and
//! hidden-dimension-routed mixtures of experts, dense Transformer and gMLP
//! baselines, and tooling to train, score and analyse them.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod model;
pub mod moe;
pub mod params;
pub mod routing;
pub mod score;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
