use ndarray::{Array2, Zip};
use rayon::prelude::*;

use super::frame::RadarFrame;
use crate::error::{Error, Result};

/// Binary land mask after dilation; `true` marks land.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LandMask {
    pub mask: Array2<bool>,
    pub dilation_range_cells: usize,
    pub dilation_azimuth_cells: usize,
}

impl LandMask {
    pub fn empty(shape: (usize, usize)) -> Self {
        Self { mask: Array2::from_elem(shape, false), dilation_range_cells: 0, dilation_azimuth_cells: 0 }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Cell-wise temporal median over the training frames. Even counts take the
/// midpoint of the two central order statistics.
pub fn compute_background(frames: &[RadarFrame]) -> Result<Array2<f64>> {
    let first = frames.first().ok_or_else(|| Error::InvalidInput("no training frames".into()))?;
    let shape = first.shape();
    for f in frames {
        if f.shape() != shape {
            return Err(Error::ShapeMismatch { expected: shape, actual: f.shape() });
        }
    }
    let (nr, na) = shape;
    let values: Vec<f64> = (0..nr * na)
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(frames.len()),
            |history, idx| {
                let (i, j) = (idx / na, idx % na);
                history.clear();
                history.extend(frames.iter().map(|f| f.intensities[(i, j)]));
                median_in_place(history)
            },
        )
        .collect();
    Ok(Array2::from_shape_vec(shape, values).expect("shape matches cell count"))
}

pub fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    assert!(n > 0, "median of empty slice");
    let mid = n / 2;
    let (lower, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower_max = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower_max + upper)
    }
}

/// Thresholds the background (`b > tau` is land) and dilates each land cell
/// to a `(2*dil_r+1) x (2*dil_a+1)` rectangle. The azimuth dilation wraps
/// when `wrap_azimuth` is set, otherwise it clips at the grid edges.
pub fn build_land_mask(background: &Array2<f64>, tau: f64, dil_r: usize, dil_a: usize, wrap_azimuth: bool) -> Result<LandMask> {
    if !tau.is_finite() {
        return Err(Error::InvalidInput("land threshold must be finite".into()));
    }
    let raw = background.mapv(|b| b > tau);
    Ok(LandMask { mask: dilate(&raw, dil_r, dil_a, wrap_azimuth), dilation_range_cells: dil_r, dilation_azimuth_cells: dil_a })
}

fn dilate(raw: &Array2<bool>, dil_r: usize, dil_a: usize, wrap_azimuth: bool) -> Array2<bool> {
    let (nr, na) = raw.dim();
    let mut along_range = Array2::from_elem((nr, na), false);
    for ((i, j), &v) in raw.indexed_iter() {
        if v {
            let lo = i.saturating_sub(dil_r);
            let hi = (i + dil_r).min(nr - 1);
            for ii in lo..=hi {
                along_range[(ii, j)] = true;
            }
        }
    }
    let mut out = Array2::from_elem((nr, na), false);
    for ((i, j), &v) in along_range.indexed_iter() {
        if !v {
            continue;
        }
        if wrap_azimuth {
            let span = (2 * dil_a + 1).min(na);
            for k in 0..span {
                let jj = (j + na * (dil_a / na + 1) - dil_a + k) % na;
                out[(i, jj)] = true;
            }
        } else {
            let lo = j.saturating_sub(dil_a);
            let hi = (j + dil_a).min(na - 1);
            for jj in lo..=hi {
                out[(i, jj)] = true;
            }
        }
    }
    out
}

/// Zeroes masked cells; every other cell is copied bit-for-bit.
pub fn apply_mask(frame: &RadarFrame, mask: &LandMask) -> Result<RadarFrame> {
    if mask.shape() != frame.shape() {
        return Err(Error::ShapeMismatch { expected: frame.shape(), actual: mask.shape() });
    }
    let mut out = frame.clone();
    Zip::from(&mut out.intensities).and(&mask.mask).for_each(|z, &land| {
        if land {
            *z = 0.0;
        }
    });
    Ok(out)
}

/// Default land threshold when none is configured: cells brighter than ten
/// times the median background are treated as land candidates, and the
/// threshold is twice the 99.5th percentile of the remaining (sea) cells.
pub fn default_land_threshold(background: &Array2<f64>) -> f64 {
    let mut all: Vec<f64> = background.iter().copied().collect();
    if all.is_empty() {
        return f64::INFINITY;
    }
    let med = median_in_place(&mut all.clone());
    let mut sea: Vec<f64> = all.drain(..).filter(|&b| b <= 10.0 * med).collect();
    if sea.is_empty() {
        return med;
    }
    sea.sort_by(f64::total_cmp);
    let idx = ((sea.len() - 1) as f64 * 0.995).round() as usize;
    2.0 * sea[idx]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::frame::FrameGeometry;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom(nr: usize, na: usize) -> FrameGeometry {
        FrameGeometry { n_range: nr, n_azimuth: na, range_res: 10.0, azimuth_res: 0.01, range_offset: 500.0, azimuth_offset: 0.0 }
    }

    fn frame_of(values: Vec<f64>, nr: usize, na: usize) -> RadarFrame {
        RadarFrame::new(Array2::from_shape_vec((nr, na), values).unwrap(), geom(nr, na), 0).unwrap()
    }

    #[test]
    fn median_conventions() {
        let frames: Vec<_> = [1.0, 5.0, 2.0].iter().map(|&v| frame_of(vec![v], 1, 1)).collect();
        assert_eq!(compute_background(&frames).unwrap()[(0, 0)], 2.0);
        let frames: Vec<_> = [1.0, 3.0].iter().map(|&v| frame_of(vec![v], 1, 1)).collect();
        assert_eq!(compute_background(&frames).unwrap()[(0, 0)], 2.0);
    }

    #[test]
    fn median_rejects_spike() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut history: Vec<f64> = (0..99).map(|_| -rng.gen::<f64>().ln()).collect();
        history.push(1e6);
        let frames: Vec<_> = history.iter().map(|&v| frame_of(vec![v], 1, 1)).collect();
        let b = compute_background(&frames).unwrap()[(0, 0)];
        let mut sorted = history[..99].to_vec();
        sorted.sort_by(f64::total_cmp);
        assert!(b >= sorted[24] && b <= sorted[74], "{b} outside clutter quartiles");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let frames = vec![frame_of(vec![0.0; 4], 2, 2), frame_of(vec![0.0; 6], 2, 3)];
        assert!(matches!(compute_background(&frames), Err(Error::ShapeMismatch { .. })));
        assert!(compute_background(&[]).is_err());
    }

    #[test]
    fn threshold_and_dilation() {
        let mut b = Array2::zeros((7, 7));
        b[(3, 3)] = 5.0;
        let m = build_land_mask(&b, 3.0, 0, 0, false).unwrap();
        assert!(m.mask[(3, 3)]);
        assert_eq!(m.count(), 1);

        let m = build_land_mask(&b, 3.0, 1, 1, false).unwrap();
        assert_eq!(m.count(), 9);
        for i in 2..=4 {
            for j in 2..=4 {
                assert!(m.mask[(i, j)]);
            }
        }
    }

    #[test]
    fn adjacent_land_cells_dilate_to_union() {
        let mut b = Array2::zeros((7, 7));
        b[(3, 3)] = 5.0;
        b[(3, 4)] = 5.0;
        let m = build_land_mask(&b, 3.0, 1, 1, false).unwrap();
        let mut expected = std::collections::BTreeSet::new();
        for (ci, cj) in [(3i64, 3i64), (3, 4)] {
            for di in -1..=1 {
                for dj in -1..=1 {
                    expected.insert((ci + di, cj + dj));
                }
            }
        }
        assert_eq!(expected.len(), 12);
        assert_eq!(m.count(), expected.len());
        for (i, j) in expected {
            assert!(m.mask[(i as usize, j as usize)]);
        }
    }

    #[test]
    fn azimuth_dilation_wraps_or_clips() {
        let mut b = Array2::zeros((3, 6));
        b[(1, 0)] = 5.0;
        let clipped = build_land_mask(&b, 1.0, 0, 1, false).unwrap();
        assert!(!clipped.mask[(1, 5)]);
        assert_eq!(clipped.count(), 2);
        let wrapped = build_land_mask(&b, 1.0, 0, 1, true).unwrap();
        assert!(wrapped.mask[(1, 5)]);
        assert_eq!(wrapped.count(), 3);
    }

    #[test]
    fn mask_identity_and_total() {
        let f = frame_of((0..12).map(|v| v as f64 + 0.5).collect(), 3, 4);
        assert_eq!(apply_mask(&f, &LandMask::empty((3, 4))).unwrap(), f);
        let all = LandMask { mask: Array2::from_elem((3, 4), true), ..LandMask::empty((3, 4)) };
        assert_eq!(apply_mask(&f, &all).unwrap().total(), 0.0);

        let checker = LandMask { mask: Array2::from_shape_fn((3, 4), |(i, j)| (i + j) % 2 == 0), ..LandMask::empty((3, 4)) };
        let out = apply_mask(&f, &checker).unwrap();
        let expected: f64 = f.intensities.indexed_iter().filter(|((i, j), _)| (i + j) % 2 == 1).map(|(_, v)| *v).sum();
        assert_eq!(out.total(), expected);
    }

    #[test]
    fn default_threshold_separates_land() {
        let mut b = Array2::from_elem((20, 20), 1.0);
        for j in 0..5 {
            b[(10, j)] = 500.0;
        }
        let tau = default_land_threshold(&b);
        assert!(tau > 1.0 && tau < 500.0);
    }

    fn grid(nr: usize, na: usize) -> impl Strategy<Value = Array2<f64>> {
        prop::collection::vec(0.0f64..10.0, nr * na).prop_map(move |v| Array2::from_shape_vec((nr, na), v).unwrap())
    }

    proptest! {
        #[test]
        fn mask_is_idempotent(z in grid(6, 5), b in grid(6, 5), tau in 0.0f64..10.0, dr in 0usize..3, da in 0usize..3) {
            let f = RadarFrame::new(z, geom(6, 5), 0).unwrap();
            let m = build_land_mask(&b, tau, dr, da, false).unwrap();
            let once = apply_mask(&f, &m).unwrap();
            let twice = apply_mask(&once, &m).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn dilation_is_monotone(b in grid(6, 5), tau in 0.0f64..10.0, dr in 0usize..3, da in 0usize..3) {
            let small = build_land_mask(&b, tau, dr, da, false).unwrap();
            let big = build_land_mask(&b, tau, dr + 1, da + 1, false).unwrap();
            for (s, l) in small.mask.iter().zip(big.mask.iter()) {
                prop_assert!(!*s || *l);
            }
        }

        #[test]
        fn median_is_permutation_invariant(values in prop::collection::vec(0.0f64..100.0, 1..12), seed in any::<u64>()) {
            let frames: Vec<_> = values.iter().map(|&v| frame_of(vec![v, 2.0 * v], 1, 2)).collect();
            let mut shuffled = frames.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..shuffled.len()).rev() {
                let j = rng.gen_range(0..=i);
                shuffled.swap(i, j);
            }
            prop_assert_eq!(compute_background(&frames).unwrap(), compute_background(&shuffled).unwrap());
        }
    }
}
