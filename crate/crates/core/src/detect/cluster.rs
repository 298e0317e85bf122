//! DBSCAN over detection cells and conversion of clusters to point
//! measurements.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PolarPoint;
use crate::preprocess::{FrameGeometry, RadarFrame};

use super::sgbd::ScoreMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DbscanConfig {
    pub eps_cells: f64,
    pub min_points: usize,
}

impl Default for DbscanConfig {
    fn default() -> Self {
        Self { eps_cells: 3.0, min_points: 3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Member cells as `(range_idx, azimuth_idx)`, sorted.
    pub member_cells: Vec<(usize, usize)>,
    pub centroid: PolarPoint,
    pub peak_score: f64,
    pub cell_count: usize,
    /// Cell containing the centroid, used for deterministic ordering.
    pub centroid_cell: (usize, usize),
}

/// Clusters the `true` cells of `mask`.
///
/// Distances are measured in range cells; an azimuth step counts as
/// `range * azimuth_res / range_res` range cells so that neighbourhoods are
/// roughly isotropic in metres. Azimuth wraps when the frame covers a full
/// circle. Centroids are the intensity-weighted mean of member-cell centres
/// (uniform weights if the frame is all zero there).
pub fn dbscan_cluster(
    mask: &Array2<bool>,
    scores: &ScoreMap,
    frame: &RadarFrame,
    cfg: &DbscanConfig,
) -> Result<Vec<Cluster>> {
    if !(cfg.eps_cells > 0.0) || cfg.min_points == 0 {
        return Err(Error::InvalidInput("DBSCAN needs eps > 0 and min_points >= 1".into()));
    }
    let shape = frame.shape();
    for s in [mask.dim(), scores.shape()] {
        if s != shape {
            return Err(Error::ShapeMismatch { expected: shape, actual: s });
        }
    }
    let g = &frame.geometry;
    let (nr, na) = shape;
    let wrap = g.is_full_circle();

    let mut id = Array2::<usize>::from_elem(shape, usize::MAX);
    let mut points = Vec::new();
    for ((i, j), &on) in mask.indexed_iter() {
        if on {
            id[(i, j)] = points.len();
            points.push((i, j));
        }
    }

    let eps = cfg.eps_cells;
    let reach = eps.floor() as isize;
    let neighbours = |p: (usize, usize)| -> Vec<usize> {
        let mut out = Vec::new();
        for di in -reach..=reach {
            let i2 = p.0 as isize + di;
            if i2 < 0 || i2 >= nr as isize {
                continue;
            }
            let r_mid = 0.5 * (g.range_center(p.0) + g.range_center(i2 as usize));
            let s = (r_mid * g.azimuth_res / g.range_res).max(1e-12);
            let rem = eps * eps - (di * di) as f64;
            let dj_max = ((rem.max(0.0).sqrt() / s).floor() as isize).min(na as isize);
            let mut seen_cols = Vec::new();
            for dj in -dj_max..=dj_max {
                let mut j2 = p.1 as isize + dj;
                if wrap {
                    j2 = j2.rem_euclid(na as isize);
                } else if j2 < 0 || j2 >= na as isize {
                    continue;
                }
                let j2 = j2 as usize;
                if seen_cols.contains(&j2) {
                    continue;
                }
                seen_cols.push(j2);
                let k = id[(i2 as usize, j2)];
                if k != usize::MAX {
                    out.push(k);
                }
            }
        }
        out
    };

    const UNVISITED: usize = usize::MAX;
    const NOISE: usize = usize::MAX - 1;
    let mut label = vec![UNVISITED; points.len()];
    let mut n_clusters = 0;
    for p in 0..points.len() {
        if label[p] != UNVISITED {
            continue;
        }
        let nb = neighbours(points[p]);
        if nb.len() < cfg.min_points {
            label[p] = NOISE;
            continue;
        }
        let c = n_clusters;
        n_clusters += 1;
        label[p] = c;
        let mut queue: VecDeque<usize> = nb.into_iter().collect();
        while let Some(q) = queue.pop_front() {
            if label[q] == NOISE {
                label[q] = c;
            }
            if label[q] != UNVISITED {
                continue;
            }
            label[q] = c;
            let nq = neighbours(points[q]);
            if nq.len() >= cfg.min_points {
                queue.extend(nq);
            }
        }
    }

    let mut members: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_clusters];
    for (p, &l) in label.iter().enumerate() {
        if l < n_clusters {
            members[l].push(points[p]);
        }
    }
    Ok(members
        .into_iter()
        .map(|cells| build_cluster(cells, scores, frame))
        .collect())
}

fn build_cluster(mut cells: Vec<(usize, usize)>, scores: &ScoreMap, frame: &RadarFrame) -> Cluster {
    cells.sort_unstable();
    let g = &frame.geometry;
    let total: f64 = cells.iter().map(|&c| frame.intensities[c].max(0.0)).sum();
    let uniform = !(total > 0.0);
    let ref_az = g.azimuth_center(cells[0].1);
    let (mut sr, mut sa, mut sw) = (0.0, 0.0, 0.0);
    for &c in &cells {
        let w = if uniform { 1.0 } else { frame.intensities[c].max(0.0) };
        sr += w * g.range_center(c.0);
        let mut da = g.azimuth_center(c.1) - ref_az;
        if g.is_full_circle() {
            da = crate::geometry::wrap_angle(da);
        }
        sa += w * da;
        sw += w;
    }
    let range = sr / sw;
    let azimuth = ref_az + sa / sw;
    let centroid = if g.is_full_circle() {
        PolarPoint::new(range, azimuth)
    } else {
        PolarPoint { range, azimuth }
    };
    let peak_score = cells.iter().map(|&c| scores.scores[c]).fold(0.0, f64::max);
    let centroid_cell = nearest_cell(g, &centroid);
    Cluster { cell_count: cells.len(), member_cells: cells, centroid, peak_score, centroid_cell }
}

fn nearest_cell(g: &FrameGeometry, p: &PolarPoint) -> (usize, usize) {
    let (fi, fj) = g.fractional_index(p);
    let i = (fi.floor().max(0.0) as usize).min(g.n_range - 1);
    let j = (fj.floor().max(0.0) as usize).min(g.n_azimuth - 1);
    (i, j)
}

/// Sorts clusters by descending peak score, ties broken by centroid cell.
pub fn sort_clusters(clusters: &mut [Cluster]) {
    clusters.sort_by(|a, b| {
        b.peak_score
            .total_cmp(&a.peak_score)
            .then(a.centroid_cell.cmp(&b.centroid_cell))
    });
}

/// One point measurement per cluster, in deterministic order.
pub fn extract_point_detections(clusters: &[Cluster]) -> Vec<PolarPoint> {
    let mut sorted = clusters.to_vec();
    sort_clusters(&mut sorted);
    sorted.iter().map(|c| c.centroid).collect()
}

pub fn write_clusters_csv(path: &Path, frames: &[(usize, Vec<Cluster>)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "k,range_m,azimuth_rad,cells,peak_score")?;
    for (k, clusters) in frames {
        let mut sorted = clusters.clone();
        sort_clusters(&mut sorted);
        for c in &sorted {
            writeln!(w, "{k},{:.6},{:.9},{},{:.6}", c.centroid.range, c.centroid.azimuth, c.cell_count, c.peak_score)?;
        }
    }
    Ok(())
}
