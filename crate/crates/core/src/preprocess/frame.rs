use std::f64::consts::TAU;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, FieldOfView, PolarPoint};

/// Polar grid geometry. Cell `(i, j)` spans ranges
/// `[range_offset + i*range_res, range_offset + (i+1)*range_res)` and
/// azimuths `[azimuth_offset + j*azimuth_res, ...)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameGeometry {
    pub n_range: usize,
    pub n_azimuth: usize,
    pub range_res: f64,
    pub azimuth_res: f64,
    pub range_offset: f64,
    pub azimuth_offset: f64,
}

impl FrameGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.n_range == 0 || self.n_azimuth == 0 {
            return Err(Error::InvalidInput("frame must have at least one cell".into()));
        }
        if !(self.range_res > 0.0 && self.azimuth_res > 0.0) {
            return Err(Error::InvalidInput("cell resolutions must be > 0".into()));
        }
        if !(self.range_offset >= 0.0 && self.range_offset.is_finite() && self.azimuth_offset.is_finite()) {
            return Err(Error::InvalidInput("invalid grid offsets".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_range, self.n_azimuth)
    }

    pub fn range_edge(&self, i: usize) -> f64 {
        self.range_offset + i as f64 * self.range_res
    }

    pub fn azimuth_edge(&self, j: usize) -> f64 {
        self.azimuth_offset + j as f64 * self.azimuth_res
    }

    pub fn range_center(&self, i: usize) -> f64 {
        self.range_offset + (i as f64 + 0.5) * self.range_res
    }

    pub fn azimuth_center(&self, j: usize) -> f64 {
        self.azimuth_offset + (j as f64 + 0.5) * self.azimuth_res
    }

    pub fn cell_center(&self, i: usize, j: usize) -> PolarPoint {
        PolarPoint::new(self.range_center(i), self.azimuth_center(j))
    }

    pub fn max_range(&self) -> f64 {
        self.range_edge(self.n_range)
    }

    pub fn field_of_view(&self) -> FieldOfView {
        FieldOfView {
            range_min: self.range_offset,
            range_max: self.max_range(),
            azimuth_min: self.azimuth_offset,
            azimuth_max: self.azimuth_edge(self.n_azimuth),
        }
    }

    /// True when the azimuth axis covers a full revolution and wraps.
    pub fn is_full_circle(&self) -> bool {
        (self.n_azimuth as f64 * self.azimuth_res - TAU).abs() < 1e-9
    }

    /// Fractional cell coordinates of a polar point (range index, azimuth
    /// index), not clipped to the grid.
    pub fn fractional_index(&self, p: &PolarPoint) -> (f64, f64) {
        let fi = (p.range - self.range_offset) / self.range_res;
        let mut da = wrap_angle(p.azimuth - self.azimuth_offset);
        if da < 0.0 && (self.is_full_circle() || da < -1e-12) {
            da += TAU;
        }
        (fi, da / self.azimuth_res)
    }

    pub fn cell_of(&self, p: &PolarPoint) -> Option<(usize, usize)> {
        let (fi, fj) = self.fractional_index(p);
        if fi < 0.0 || fj < 0.0 {
            return None;
        }
        let (i, j) = (fi.floor() as usize, fj.floor() as usize);
        (i < self.n_range && j < self.n_azimuth).then_some((i, j))
    }

    /// Azimuth of `a` relative to `reference`, wrapped to `(-pi, pi]`-ish
    /// principal interval.
    pub fn azimuth_delta(&self, a: f64, reference: f64) -> f64 {
        wrap_angle(a - reference)
    }

    pub fn crop(&self, range: std::ops::Range<usize>, azimuth: std::ops::Range<usize>) -> Self {
        Self {
            n_range: range.len(),
            n_azimuth: azimuth.len(),
            range_offset: self.range_edge(range.start),
            azimuth_offset: self.azimuth_edge(azimuth.start),
            ..*self
        }
    }
}

/// One radar scan of non-negative linear power values, range-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarFrame {
    pub intensities: Array2<f64>,
    pub geometry: FrameGeometry,
    pub timestamp_index: usize,
}

impl RadarFrame {
    pub fn new(intensities: Array2<f64>, geometry: FrameGeometry, timestamp_index: usize) -> Result<Self> {
        let frame = Self { intensities, geometry, timestamp_index };
        frame.validate()?;
        Ok(frame)
    }

    pub fn zeros(geometry: FrameGeometry, timestamp_index: usize) -> Self {
        Self { intensities: Array2::zeros(geometry.shape()), geometry, timestamp_index }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.intensities.dim() != self.geometry.shape() {
            return Err(Error::ShapeMismatch { expected: self.geometry.shape(), actual: self.intensities.dim() });
        }
        if let Some(v) = self.intensities.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidInput(format!("intensity {v} is negative or non-finite")));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        self.intensities.dim()
    }

    pub fn total(&self) -> f64 {
        self.intensities.sum()
    }

    pub fn crop(&self, range: std::ops::Range<usize>, azimuth: std::ops::Range<usize>) -> Result<Self> {
        let (nr, na) = self.shape();
        if range.end > nr || azimuth.end > na || range.is_empty() || azimuth.is_empty() {
            return Err(Error::InvalidInput(format!(
                "crop window {range:?} x {azimuth:?} outside frame {nr}x{na}"
            )));
        }
        let data = self.intensities.slice(s![range.clone(), azimuth.clone()]).to_owned();
        Ok(Self {
            intensities: data,
            geometry: self.geometry.crop(range, azimuth),
            timestamp_index: self.timestamp_index,
        })
    }
}
