use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{median_in_place, LandMask, RadarFrame};

/// Shape of the clutter spatial density over the frame. Azimuth is always
/// uniform; the radial shape is chosen here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClutterProfile {
    Uniform,
    /// Density proportional to `exp(-range / scale_m)`.
    Exponential { scale_m: f64 },
    /// Per-range-row median of the current frame.
    RowMedian,
}

/// Clutter rate and its per-cell spatial mass (sums to one over the
/// unmasked cells).
#[derive(Debug, Clone, PartialEq)]
pub struct ClutterModel {
    pub lambda0: f64,
    pub cell_density: Array2<f64>,
}

impl ClutterModel {
    pub fn from_profile(frame: &RadarFrame, mask: Option<&LandMask>, profile: &ClutterProfile) -> Result<Self> {
        let (nr, na) = frame.shape();
        if let Some(m) = mask {
            if m.shape() != (nr, na) {
                return Err(Error::ShapeMismatch { expected: (nr, na), actual: m.shape() });
            }
        }
        let land = |i: usize, j: usize| mask.is_some_and(|m| m.mask[(i, j)]);
        let g = &frame.geometry;
        let row_weight: Vec<f64> = match profile {
            ClutterProfile::Uniform => vec![1.0; nr],
            ClutterProfile::Exponential { scale_m } => {
                if !(*scale_m > 0.0) {
                    return Err(Error::Config("clutter profile scale must be positive".into()));
                }
                (0..nr).map(|i| (-(g.range_center(i) - g.range_offset) / scale_m).exp()).collect()
            }
            ClutterProfile::RowMedian => (0..nr)
                .map(|i| {
                    let mut row: Vec<f64> = (0..na).filter(|&j| !land(i, j)).map(|j| frame.intensities[(i, j)]).collect();
                    if row.is_empty() {
                        0.0
                    } else {
                        median_in_place(&mut row).max(0.0)
                    }
                })
                .collect(),
        };
        let mut density = Array2::from_shape_fn((nr, na), |(i, j)| if land(i, j) { 0.0 } else { row_weight[i] });
        let total: f64 = density.sum();
        if total > 0.0 {
            density.mapv_inplace(|v| v / total);
        } else {
            // degenerate frame: fall back to uniform over unmasked cells
            density = Array2::from_shape_fn((nr, na), |(i, j)| if land(i, j) { 0.0 } else { 1.0 });
            let n = density.sum();
            if n == 0.0 {
                return Err(Error::InvalidInput("every cell is masked".into()));
            }
            density.mapv_inplace(|v| v / n);
        }
        Ok(Self { lambda0: 0.0, cell_density: density })
    }

    /// Sets `lambda0` from the intensity of cells not flagged in `covered`,
    /// divided by their share of the spatial density.
    pub fn estimate_rate(&mut self, frame: &RadarFrame, covered: &Array2<bool>) {
        let (mut z, mut p) = (0.0, 0.0);
        for ((idx, &c), &d) in covered.indexed_iter().zip(self.cell_density.iter()) {
            if !c {
                z += frame.intensities[idx].max(0.0);
                p += d;
            }
        }
        self.lambda0 = if p > 0.0 { z / p } else { frame.intensities.iter().map(|v| v.max(0.0)).sum() };
    }

    /// Expected clutter intensity in a cell.
    pub fn cell_rate(&self, cell: (usize, usize)) -> f64 {
        self.lambda0 * self.cell_density[cell]
    }
}
