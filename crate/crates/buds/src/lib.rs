//! Staged pipeline for bottom-up skill discovery: demo generation,
//! representation learning, segmentation, clustering, hierarchical policy
//! training, rollouts and evaluation, driven by one JSON config.

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::{Arm, PipelineConfig, Preset, Selection};
pub use error::{BudsError, Result};
pub use pipeline::{run_stage, Stage};
