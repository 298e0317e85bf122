//! Union of point-tracker and track-before-detect estimates.

use serde::{Deserialize, Serialize};

use crate::geometry::TargetState;
use crate::pmbm::TrackEstimate;
use crate::tbd::TbdEstimate;

/// Offset added to track-before-detect labels so that fused labels from the
/// two sources never collide.
pub const TBD_LABEL_BASE: u64 = 1_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Source {
    Pmbm,
    Tbd,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Pmbm => "PMBM",
            Source::Tbd => "TBD",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedEstimate {
    pub k: usize,
    pub label: u64,
    pub state: TargetState,
    pub source: Source,
    pub existence: f64,
}

/// A point-tracker and a track-before-detect estimate closer than the
/// birth suppression radius in the same frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProximityWarning {
    pub k: usize,
    pub pmbm_label: u64,
    pub tbd_label: u64,
    pub distance: f64,
}

/// Concatenates both estimate sets (point tracker first, each by label) and
/// reports pairs closer than `epsilon`.
pub fn fuse(pmbm: &[TrackEstimate], tbd: &[TbdEstimate], k: usize, epsilon: f64) -> (Vec<FusedEstimate>, Vec<ProximityWarning>) {
    let mut p: Vec<&TrackEstimate> = pmbm.iter().collect();
    p.sort_by_key(|e| e.label);
    let mut t: Vec<&TbdEstimate> = tbd.iter().collect();
    t.sort_by_key(|e| e.label);
    let mut out = Vec::with_capacity(p.len() + t.len());
    out.extend(p.iter().map(|e| FusedEstimate { k, label: e.label, state: e.state, source: Source::Pmbm, existence: e.r }));
    out.extend(t.iter().map(|e| FusedEstimate {
        k,
        label: TBD_LABEL_BASE + e.label,
        state: e.state,
        source: Source::Tbd,
        existence: e.r,
    }));
    let mut warnings = Vec::new();
    for a in &p {
        for b in &t {
            let (ax, ay) = a.state.position();
            let (bx, by) = b.state.position();
            let d = (ax - bx).hypot(ay - by);
            if d < epsilon {
                warnings.push(ProximityWarning { k, pmbm_label: a.label, tbd_label: b.label, distance: d });
            }
        }
    }
    (out, warnings)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(label: u64, x: f64) -> TrackEstimate {
        TrackEstimate { label, state: TargetState::new(x, 0.0, 0.0, 0.0), r: 0.9 }
    }

    fn t(label: u64, x: f64) -> TbdEstimate {
        TbdEstimate { label, state: TargetState::new(x, 0.0, 0.0, 0.0), r: 0.8, lambda_hat: 12.0 }
    }

    #[test]
    fn union_sizes_and_order() {
        let (f, w) = fuse(&[p(3, 0.0), p(1, 1000.0), p(2, 2000.0)], &[t(2, 5000.0), t(1, 6000.0)], 4, 100.0);
        assert_eq!(f.len(), 5);
        let labels: Vec<u64> = f.iter().map(|e| e.label).collect();
        assert_eq!(labels, vec![1, 2, 3, TBD_LABEL_BASE + 1, TBD_LABEL_BASE + 2]);
        assert!(w.is_empty());
        assert!(fuse(&[], &[], 0, 100.0).0.is_empty());
    }

    #[test]
    fn duplicate_flagged() {
        let (f, w) = fuse(&[p(1, 0.0)], &[t(9, 60.0)], 2, 100.0);
        assert_eq!(f.len(), 2);
        // pairwise distance oracle
        let d = (0.0f64 - 60.0).abs();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].distance, d);
        assert_eq!((w[0].pmbm_label, w[0].tbd_label), (1, 9));
    }
}
