//! Evaluation toolkit for Bayesian segmentation model outputs.
//!
//! The crate consumes Monte-Carlo probability stacks over voxel grids and
//! produces everything a contour-QA analysis needs downstream of network
//! training: averaged probability maps and argmax predictions, entropy
//! uncertainty maps, per-class DICE and HD95 scores, expected calibration
//! error with reliability tables, region-based accuracy-vs-uncertainty
//! (R-AvU) curves, reference training-loss evaluations with verified
//! gradients, paired Wilcoxon tests, and a reproducible multi-model
//! evaluation pipeline. A synthetic generator with controllable calibration
//! and error geometry stands in for trained networks in tests.

pub mod aggregate;
pub mod bundle;
pub mod calibration;
pub mod error;
mod kdtree;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod ravu;
pub mod stats;
pub mod synth;
pub mod volume;

pub use error::{Result, UqError};
pub use volume::{Bundle, GridMeta, LabelVolume, McStack, ProbVolume, ScalarMap};
