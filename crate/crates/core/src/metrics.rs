//! GOSPA scoring and ground-truth handling.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::assignment::solve;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTrack {
    pub id: u64,
    /// `(time_s, px, py)`, strictly increasing in time.
    pub samples: Vec<(f64, f64, f64)>,
}

impl GroundTruthTrack {
    pub fn validate(&self) -> Result<()> {
        if self.samples.windows(2).all(|w| w[1].0 > w[0].0) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("truth track {} times not strictly increasing", self.id)))
        }
    }

    pub fn interval(&self) -> Option<(f64, f64)> {
        Some((self.samples.first()?.0, self.samples.last()?.0))
    }
}

/// Linear interpolation inside the sampled interval, `None` outside.
pub fn interpolate_truth(track: &GroundTruthTrack, t: f64) -> Option<(f64, f64)> {
    let s = &track.samples;
    let (t0, t1) = track.interval()?;
    if t < t0 || t > t1 {
        return None;
    }
    let idx = s.partition_point(|x| x.0 <= t);
    if idx == 0 {
        return Some((s[0].1, s[0].2));
    }
    let a = s[idx - 1];
    if a.0 == t || idx == s.len() {
        return Some((a.1, a.2));
    }
    let b = s[idx];
    let w = (t - a.0) / (b.0 - a.0);
    Some((a.1 + w * (b.1 - a.1), a.2 + w * (b.2 - a.2)))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GospaResult {
    pub total: f64,
    pub loc_sq: f64,
    pub missed_count: usize,
    pub false_count: usize,
    pub missed_sq: f64,
    pub false_sq: f64,
}

/// GOSPA with `alpha = 2`. The decomposed terms are contributions to
/// `total^p`.
pub fn gospa(truth: &[(f64, f64)], est: &[(f64, f64)], c: f64, p: f64) -> Result<GospaResult> {
    if !(c > 0.0 && p >= 1.0) {
        return Err(Error::InvalidInput("GOSPA needs c > 0 and p >= 1".into()));
    }
    let penalty = c.powf(p) / 2.0;
    let transpose = truth.len() > est.len();
    let (rows, cols) = if transpose { (est, truth) } else { (truth, est) };
    let mut cost = DMatrix::zeros(rows.len(), cols.len());
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in cols.iter().enumerate() {
            cost[(i, j)] = (a.0 - b.0).hypot(a.1 - b.1).min(c).powf(p);
        }
    }
    let assignment = solve(&cost).ok_or_else(|| Error::InvalidInput("non-finite positions".into()))?;
    let mut loc_sq = 0.0;
    let mut matched = 0;
    for (i, &j) in assignment.columns.iter().enumerate() {
        let (a, b) = (rows[i], cols[j]);
        let d = (a.0 - b.0).hypot(a.1 - b.1);
        if d < c {
            loc_sq += d.powf(p);
            matched += 1;
        }
    }
    let missed_count = truth.len() - matched;
    let false_count = est.len() - matched;
    let missed_sq = penalty * missed_count as f64;
    let false_sq = penalty * false_count as f64;
    Ok(GospaResult { total: (loc_sq + missed_sq + false_sq).powf(1.0 / p), loc_sq, missed_count, false_count, missed_sq, false_sq })
}

/// One row of the per-frame metrics file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub k: usize,
    pub result: GospaResult,
    pub n_truth: usize,
    pub n_est: usize,
}

/// Column-wise time averages of the metric rows.
pub fn average(rows: &[MetricsRow]) -> [f64; 6] {
    let n = rows.len().max(1) as f64;
    let mut acc = [0.0; 6];
    for r in rows {
        acc[0] += r.result.total;
        acc[1] += r.result.loc_sq;
        acc[2] += r.result.missed_sq;
        acc[3] += r.result.false_sq;
        acc[4] += r.n_truth as f64;
        acc[5] += r.n_est as f64;
    }
    acc.map(|v| v / n)
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "k,total,loc_sq,missed_sq,false_sq,n_truth,n_est")?;
    for r in rows {
        let g = &r.result;
        writeln!(w, "{},{:.6},{:.6},{:.6},{:.6},{},{}", r.k, g.total, g.loc_sq, g.missed_sq, g.false_sq, r.n_truth, r.n_est)?;
    }
    let a = average(rows);
    writeln!(w, "mean,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}", a[0], a[1], a[2], a[3], a[4], a[5])?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRecord {
    id: u64,
    t: f64,
    px: f64,
    py: f64,
}

pub fn write_truth_csv(path: &Path, tracks: &[GroundTruthTrack]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for tr in tracks {
        for &(t, px, py) in &tr.samples {
            w.serialize(TruthRecord { id: tr.id, t, px, py })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_truth_csv(path: &Path) -> Result<Vec<GroundTruthTrack>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut by_id: BTreeMap<u64, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for rec in r.deserialize() {
        let rec: TruthRecord = rec?;
        by_id.entry(rec.id).or_default().push((rec.t, rec.px, rec.py));
    }
    let tracks: Vec<GroundTruthTrack> = by_id
        .into_iter()
        .map(|(id, mut samples)| {
            samples.sort_by(|a, b| a.0.total_cmp(&b.0));
            GroundTruthTrack { id, samples }
        })
        .collect();
    for t in &tracks {
        t.validate()?;
    }
    Ok(tracks)
}

/// Truth positions alive at time `t`.
pub fn truth_at(tracks: &[GroundTruthTrack], t: f64) -> Vec<(f64, f64)> {
    tracks.iter().filter_map(|tr| interpolate_truth(tr, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation() {
        let tr = GroundTruthTrack { id: 1, samples: vec![(0.0, 0.0, 0.0), (10.0, 10.0, 0.0)] };
        assert_eq!(interpolate_truth(&tr, 5.0), Some((5.0, 0.0)));
        assert_eq!(interpolate_truth(&tr, -1.0), None);
        assert_eq!(interpolate_truth(&tr, 10.0), Some((10.0, 0.0)));
        assert_eq!(interpolate_truth(&tr, 0.0), Some((0.0, 0.0)));
        assert_eq!(interpolate_truth(&tr, 10.5), None);
    }

    #[test]
    fn gospa_examples() {
        assert_eq!(gospa(&[], &[], 350.0, 2.0).unwrap().total, 0.0);
        let miss = gospa(&[(0.0, 0.0)], &[], 350.0, 2.0).unwrap();
        assert!((miss.total - (350.0f64 * 350.0 / 2.0).sqrt()).abs() < 1e-9);
        assert!((miss.total - 247.4874).abs() < 1e-4);
        assert_eq!(miss.missed_sq, 61250.0);
        let near = gospa(&[(0.0, 0.0)], &[(10.0, 0.0)], 350.0, 2.0).unwrap();
        assert!((near.total - 10.0).abs() < 1e-12);
        assert_eq!((near.loc_sq, near.missed_count, near.false_count), (100.0, 0, 0));
    }

    #[test]
    fn gospa_symmetry() {
        let a = [(0.0, 0.0), (500.0, 0.0), (900.0, 40.0)];
        let b = [(30.0, 0.0), (2000.0, 0.0)];
        let ab = gospa(&a, &b, 350.0, 2.0).unwrap();
        let ba = gospa(&b, &a, 350.0, 2.0).unwrap();
        assert!((ab.total - ba.total).abs() < 1e-9);
        assert_eq!((ab.missed_count, ab.false_count), (ba.false_count, ba.missed_count));
        assert_eq!(gospa(&a, &a, 350.0, 2.0).unwrap().total, 0.0);
        assert!(gospa(&a, &a[..2], 350.0, 2.0).unwrap().total > 0.0);
    }

    #[test]
    fn truth_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("truth.csv");
        let tracks = vec![
            GroundTruthTrack { id: 1, samples: vec![(0.0, 1.0, 2.0), (2.5, 3.0, 4.0)] },
            GroundTruthTrack { id: 4, samples: vec![(5.0, 1.5, 2.5)] },
        ];
        write_truth_csv(&p, &tracks).unwrap();
        assert_eq!(read_truth_csv(&p).unwrap(), tracks);
    }
}
