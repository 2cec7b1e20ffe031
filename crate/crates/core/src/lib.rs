//! Moment-tensor certification and robust clustering.
//!
//! The crate certifies injective-norm bounds on empirical moment tensors
//! through sum-of-squares relaxations and feeds those certificates into an
//! outlier-robust mean estimation and clustering pipeline. Synthetic data
//! generation and a CLI driver live here as well.

pub mod cluster;
pub mod config;
pub mod datagen;
pub mod matching;
pub mod pipeline;
pub mod poincare;
pub mod pseudomoments;
pub mod sdp;
pub mod tensor;
