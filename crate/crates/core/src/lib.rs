//! Reasoning video object segmentation on a synthetic moving-shapes benchmark.
//!
//! The pipeline picks a target frame from text-guided percentage responses,
//! prompts a small sequence model with the target and reference frames, turns
//! the hidden state of its `<seg>` token into a mask prompt, decodes the target
//! frame mask and propagates it through the video in both directions.

pub mod autograd;
pub mod config;
pub mod decoder;
pub mod error;
pub mod formats;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod synth;
pub mod tracker;
pub mod train;
pub mod video;

pub use error::{Error, Result};
