//! Two-stage cerebral microbleed detection and segmentation on T2*-weighted
//! MRI: preprocessing, a patch-based candidate detector, a slice-context
//! segmenter, intensity and brain-mask post-processing, and lesion-level
//! evaluation, with a synthetic phantom generator for desk-scale checks.

pub mod augment;
pub mod catalog;
pub mod config;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod manifest;
pub mod morphology;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod postprocess;
pub mod preprocess;
pub mod segmenter;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Spacing, Volume};
