//! Cell-wise spatial-gradient detector.
//!
//! Central-difference gradients of the (land-masked) frame are smoothed
//! with a separable Gaussian, the divergence of the smoothed field is taken,
//! and its negative part is scaled into `[0, 1]` by a fixed calibration
//! constant. Bright compact returns produce strongly converging gradient
//! fields and hence large scores.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::RadarFrame;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgbdConfig {
    /// Gaussian smoothing standard deviation in cells.
    pub sigma_s: f64,
    /// Raw divergence value mapped to score 1.
    pub scale: f64,
}

impl Default for SgbdConfig {
    fn default() -> Self {
        Self { sigma_s: 1.5, scale: 1.0 }
    }
}

/// Detector scores in `[0, 1]`, same shape as the frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub scores: Array2<f64>,
}

impl ScoreMap {
    pub fn shape(&self) -> (usize, usize) {
        self.scores.dim()
    }
}

fn kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-0.5 * x * x / (sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Convolves every lane along `axis` with `k`, replicating edge values.
fn convolve_axis(input: &Array2<f64>, k: &[f64], axis: Axis) -> Array2<f64> {
    let radius = (k.len() / 2) as isize;
    let mut out = Array2::zeros(input.dim());
    let lanes_in: Vec<_> = input.lanes(axis).into_iter().collect();
    let results: Vec<Vec<f64>> = lanes_in
        .par_iter()
        .map(|lane| {
            let n = lane.len() as isize;
            (0..n)
                .map(|i| {
                    k.iter()
                        .enumerate()
                        .map(|(t, w)| {
                            let idx = (i + t as isize - radius).clamp(0, n - 1) as usize;
                            w * lane[idx]
                        })
                        .sum()
                })
                .collect()
        })
        .collect();
    for (mut lane, vals) in out.lanes_mut(axis).into_iter().zip(results) {
        for (o, v) in lane.iter_mut().zip(vals) {
            *o = v;
        }
    }
    out
}

fn central_difference(input: &Array2<f64>, axis: Axis) -> Array2<f64> {
    let mut out = Array2::zeros(input.dim());
    for (lane_in, mut lane_out) in input.lanes(axis).into_iter().zip(out.lanes_mut(axis)) {
        let n = lane_in.len();
        if n < 2 {
            continue;
        }
        for i in 0..n {
            let (lo, hi) = (i.saturating_sub(1), (i + 1).min(n - 1));
            lane_out[i] = (lane_in[hi] - lane_in[lo]) / (hi - lo) as f64;
        }
    }
    out
}

/// Unnormalised detector response `max(0, -div(G * grad z))`.
pub fn sgbd_raw(frame: &RadarFrame, sigma_s: f64) -> Result<Array2<f64>> {
    if !(sigma_s > 0.0) {
        return Err(Error::InvalidInput("smoothing sigma must be > 0".into()));
    }
    let k = kernel(sigma_s);
    let (nr, na) = frame.shape();
    if nr < k.len() || na < k.len() {
        return Err(Error::InvalidInput(format!(
            "frame {nr}x{na} is smaller than the {}-tap smoothing kernel",
            k.len()
        )));
    }
    let z = &frame.intensities;
    let smooth = |g: Array2<f64>| convolve_axis(&convolve_axis(&g, &k, Axis(0)), &k, Axis(1));
    let gr = smooth(central_difference(z, Axis(0)));
    let ga = smooth(central_difference(z, Axis(1)));
    let div = central_difference(&gr, Axis(0)) + central_difference(&ga, Axis(1));
    Ok(div.mapv(|d| (-d).max(0.0)))
}

pub fn sgbd_score(frame: &RadarFrame, cfg: &SgbdConfig) -> Result<ScoreMap> {
    if !(cfg.scale > 0.0) {
        return Err(Error::InvalidInput("score scale must be > 0".into()));
    }
    let raw = sgbd_raw(frame, cfg.sigma_s)?;
    Ok(ScoreMap { scores: raw.mapv(|v| (v / cfg.scale).clamp(0.0, 1.0)) })
}

/// Calibration constant: the given quantile (e.g. 0.9999) of the raw
/// response over a set of clutter-only frames.
pub fn calibrate_scale(frames: &[RadarFrame], sigma_s: f64, quantile: f64) -> Result<f64> {
    let mut values = Vec::new();
    for f in frames {
        values.extend(sgbd_raw(f, sigma_s)?.iter().copied());
    }
    if values.is_empty() {
        return Err(Error::InvalidInput("no calibration frames".into()));
    }
    let idx = (((values.len() - 1) as f64) * quantile.clamp(0.0, 1.0)).round() as usize;
    let (_, v, _) = values.select_nth_unstable_by(idx, f64::total_cmp);
    Ok(if *v > 0.0 { *v } else { f64::MIN_POSITIVE })
}

/// Binary detections: `true` iff the score is strictly above `tau`.
pub fn threshold_detect(scores: &ScoreMap, tau: f64) -> Result<Array2<bool>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidInput(format!("threshold {tau} outside [0, 1]")));
    }
    Ok(scores.scores.mapv(|s| s > tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::FrameGeometry;

    fn geom(n: usize) -> FrameGeometry {
        FrameGeometry { n_range: n, n_azimuth: n, range_res: 10.0, azimuth_res: 0.005, range_offset: 2000.0, azimuth_offset: 0.0 }
    }

    fn blob(n: usize, centres: &[(f64, f64)], sigma: f64) -> RadarFrame {
        let data = Array2::from_shape_fn((n, n), |(i, j)| {
            centres
                .iter()
                .map(|(ci, cj)| {
                    let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                    10.0 * (-0.5 * d2 / (sigma * sigma)).exp()
                })
                .sum()
        });
        RadarFrame::new(data, geom(n), 0).unwrap()
    }

    fn argmax(a: &Array2<f64>) -> (usize, usize) {
        a.indexed_iter().max_by(|x, y| x.1.total_cmp(y.1)).unwrap().0
    }

    #[test]
    fn constant_frame_scores_zero() {
        let f = RadarFrame::new(Array2::from_elem((20, 20), 3.0), geom(20), 0).unwrap();
        let s = sgbd_score(&f, &SgbdConfig::default()).unwrap();
        assert!(s.scores.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blob_peaks_at_centre() {
        let f = blob(31, &[(15.0, 12.0)], 2.0);
        let raw = sgbd_raw(&f, 1.5).unwrap();
        // brute-force argmax of the rendered image
        let (bi, bj) = argmax(&f.intensities);
        let (si, sj) = argmax(&raw);
        assert!(si.abs_diff(bi) <= 1 && sj.abs_diff(bj) <= 1, "{:?} vs {:?}", (si, sj), (bi, bj));
    }

    #[test]
    fn twin_blobs_score_equally() {
        let f = blob(41, &[(20.0, 10.0), (20.0, 30.0)], 2.0);
        let raw = sgbd_raw(&f, 1.5).unwrap();
        assert!((raw[(20, 10)] - raw[(20, 30)]).abs() < 1e-6 * raw[(20, 10)]);
        assert!(raw[(20, 10)] > raw[(20, 20)]);
    }

    #[test]
    fn shift_moves_argmax() {
        let a = sgbd_raw(&blob(31, &[(15.0, 12.0)], 2.0), 1.5).unwrap();
        let b = sgbd_raw(&blob(31, &[(16.0, 12.0)], 2.0), 1.5).unwrap();
        let (ai, aj) = argmax(&a);
        assert_eq!(argmax(&b), (ai + 1, aj));
    }

    #[test]
    fn small_frame_rejected() {
        let f = RadarFrame::new(Array2::zeros((5, 40)), FrameGeometry { n_range: 5, n_azimuth: 40, ..geom(5) }, 0).unwrap();
        assert!(sgbd_score(&f, &SgbdConfig::default()).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let s = ScoreMap { scores: Array2::from_shape_vec((1, 3), vec![0.11, 0.12, 0.13]).unwrap() };
        let d = threshold_detect(&s, 0.12).unwrap();
        assert_eq!(d.iter().copied().collect::<Vec<_>>(), vec![false, false, true]);
        assert!(threshold_detect(&s, 1.0).unwrap().iter().all(|&b| !b));
        assert!(threshold_detect(&s, 0.0).unwrap().iter().all(|&b| b));
        assert!(threshold_detect(&s, 1.5).is_err());
    }

    #[test]
    fn scores_clamped_to_unit_interval() {
        let f = blob(31, &[(15.0, 12.0)], 2.0);
        let s = sgbd_score(&f, &SgbdConfig { sigma_s: 1.5, scale: 1e-3 }).unwrap();
        assert!(s.scores.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(s.scores[(15, 12)], 1.0);
    }
}
