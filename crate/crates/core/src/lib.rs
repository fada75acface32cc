//! Adversarially transformable patterns against metric-learning person
//! re-identification models, together with the probe/gallery retrieval
//! protocol used to measure them.
//!
//! The crate is organised bottom-up:
//!
//! - [`imagecore`]: rasters, patterns, masks, total variation, interval projection
//! - [`geometry`]: homographies, perspective warping and pattern overlay
//! - [`physicsim`]: degradation, multi-position augmentation, toy dataset generation
//! - [`reid`]: small differentiable embedding models and their training
//! - [`attack`]: generating sets, tuple sampling, objectives and the optimisation loop
//! - [`evalbench`]: ranking, rank-k / mAP metrics and the attack evaluation protocol

pub mod attack;
pub mod dataset;
pub mod error;
pub mod evalbench;
pub mod geometry;
pub mod imagecore;
pub mod optim;
pub mod physicsim;
pub mod reid;
pub mod rng;

pub use error::{Error, Result};
