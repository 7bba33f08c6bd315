//! Skill discovery from unsegmented multimodal demonstrations.
//!
//! The pipeline runs bottom-up:
//!
//! 1. [`repr`] learns a fused per-state latent with a product of Gaussian experts.
//! 2. [`seg`] builds an adjacent-merge hierarchy per demonstration and extracts
//!    temporal segments by breadth-first search.
//! 3. [`cluster`] groups segments from every task into skills with spectral
//!    clustering and materializes goal-conditioned datasets.
//! 4. [`hbc`] trains the skill policies and per-task meta controllers.
//!
//! [`env`] is a small deterministic manipulation world that produces the
//! scripted demonstrations and runs closed-loop rollouts; [`metrics`] scores
//! segmentations and rollouts.

pub mod cluster;
pub mod data;
pub mod env;
pub mod error;
pub mod hbc;
pub mod metrics;
pub mod nn;
pub mod repr;
pub mod seg;

pub use error::{Error, Result};
