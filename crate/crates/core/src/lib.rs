//! Hybrid multi-target tracking for scanning maritime radar.
//!
//! Raw range-azimuth intensity frames are land-masked, scored by a
//! gradient-based cell detector and thresholded twice. High-threshold
//! clusters feed a Poisson multi-Bernoulli mixture (PMBM) point tracker;
//! low-threshold clusters seed an integrated-existence Poisson
//! histogram-PMHT track-before-detect filter that runs on the unthresholded
//! frame. The two track sets are merged into one output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod detect;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod metrics;
pub mod pmbm;
pub mod pipeline;
pub mod preprocess;
pub mod simulator;
pub mod special;
pub mod tbd;

pub use error::{Error, Result};
