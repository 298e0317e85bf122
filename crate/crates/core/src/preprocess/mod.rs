//! Terrain segmentation: temporal-median background, thresholded and
//! dilated land mask, per-frame masking, and the frame file container.

pub mod container;
mod frame;
mod mask;

pub use frame::{FrameGeometry, RadarFrame};
pub use mask::{apply_mask, build_land_mask, compute_background, default_land_threshold, median_in_place, LandMask};
