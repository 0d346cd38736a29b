//! Tumor segmentation with saliency-guided attention.
//!
//! - [`dataset`]: image/mask/saliency triples, resizing, cross-validation
//!   folds and a synthetic generator.
//! - [`saliency`]: contour statistics and the confidence filter that rejects
//!   ambiguous saliency maps.
//! - [`model`]: U-Net and salient-attention U-Net on a small CPU engine
//!   ([`nn`]).
//! - [`trainer`]: Dice loss, early stopping, cross-validation, checkpoints.
//! - [`metrics`]: region and boundary metrics, aggregation, Wilcoxon test.
//! - [`pipeline`]: per-variant preparation and fold evaluation.

pub mod dataset;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod saliency;
pub mod trainer;
