use std::collections::BTreeMap;

use nalgebra::{Matrix4, Vector4};
use rayon::prelude::*;

use super::{measurement_model_ok, normalise, polar_clutter_density, Association, Bernoulli, GlobalHypothesis, PmbmConfig, PmbmPosterior, PoissonIntensity};
use crate::assignment::kbest_sparse;
use crate::error::Result;
use crate::geometry::{ekf_polar_update_with_cov, MeasurementModel, PolarPoint, PolarPrediction, StateDensity};
use crate::special::log_sum_exp;

/// Result of gating and updating one Bernoulli against every measurement.
struct BernoulliUpdate {
    ln_miss: f64,
    /// Per measurement: posterior density and log detection weight.
    detections: Vec<Option<(StateDensity, f64)>>,
    /// Indices of gated measurements.
    gated: Vec<usize>,
}

struct NewTarget {
    /// ln(e + clutter), the weight of "measurement is new or clutter".
    ln_weight: f64,
    bernoulli: Option<(f64, StateDensity)>,
}

type ChildKey = (usize, Association);

struct Child {
    ln_weight: f64,
    parts: Vec<ChildKey>,
}

pub fn pmbm_update(
    post: &PmbmPosterior,
    measurements: &[PolarPoint],
    mm: &MeasurementModel,
    cfg: &PmbmConfig,
) -> Result<PmbmPosterior> {
    measurement_model_ok(mm)?;
    let r_cov = mm.covariance();
    let p_d = cfg.p_d;

    let updates: Vec<BernoulliUpdate> = post
        .bernoullis
        .par_iter()
        .map(|b| update_bernoulli(b, measurements, &r_cov, cfg))
        .collect::<Result<_>>()?;

    let new_targets: Vec<NewTarget> = measurements
        .par_iter()
        .map(|z| new_target(&post.poisson, z, &r_cov, cfg))
        .collect::<Result<_>>()?;

    let children: Vec<Vec<Child>> = post
        .hypotheses
        .par_iter()
        .enumerate()
        .map(|(i, h)| expand_hypothesis(h, &updates, &new_targets, cfg, ((post.time as u64) << 32) | i as u64))
        .collect();

    // canonical pool: keys sorted, new-target labels in measurement order
    let mut pool_index: BTreeMap<ChildKey, usize> = BTreeMap::new();
    for c in children.iter().flatten() {
        for k in &c.parts {
            pool_index.insert(*k, 0);
        }
    }
    let mut next_label = post.next_label;
    let mut bernoullis = Vec::with_capacity(pool_index.len());
    let mut new_labels: BTreeMap<usize, u64> = BTreeMap::new();
    for (key, idx) in pool_index.iter_mut() {
        *idx = bernoullis.len();
        let b = match *key {
            (b, Association::Missed) => {
                let prior = &post.bernoullis[b];
                let r = prior.r * (1.0 - p_d) / (1.0 - prior.r * p_d);
                Bernoulli { r, ..prior.clone() }
            }
            (b, Association::Detected(m)) => {
                let prior = &post.bernoullis[b];
                let density = updates[b].detections[m].as_ref().expect("assigned pair is gated").0;
                Bernoulli { r: 1.0, density, ..prior.clone() }
            }
            (_, Association::New(m)) => {
                let (r, density) = new_targets[m].bernoulli.expect("new component exists");
                let label = *new_labels.entry(m).or_insert_with(|| {
                    next_label += 1;
                    next_label - 1
                });
                Bernoulli { r, density, label, birth_time: post.time }
            }
            (_, Association::Unchanged) => unreachable!("update never leaves a component unchanged"),
        };
        bernoullis.push(b);
    }

    let mut merged: Vec<(f64, GlobalHypothesis)> = Vec::new();
    let mut seen: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for c in children.into_iter().flatten() {
        let mut pairs: Vec<(usize, Association)> = c.parts.iter().map(|k| (pool_index[k], k.1)).collect();
        pairs.sort_unstable();
        let (components, associations): (Vec<usize>, Vec<Association>) = pairs.into_iter().unzip();
        match seen.get(&components) {
            Some(&i) => merged[i].0 = log_sum_exp([merged[i].0, c.ln_weight]),
            None => {
                seen.insert(components.clone(), merged.len());
                merged.push((c.ln_weight, GlobalHypothesis { weight: 0.0, components, associations }));
            }
        }
    }

    let lse = log_sum_exp(merged.iter().map(|m| m.0));
    let mut hyps: Vec<(usize, GlobalHypothesis)> = merged
        .into_iter()
        .map(|(lw, mut h)| {
            h.weight = (lw - lse).exp();
            h
        })
        .filter(|h| h.weight > 0.0)
        .enumerate()
        .collect();
    if hyps.len() > cfg.max_hypotheses {
        hyps.sort_by(|a, b| b.1.weight.total_cmp(&a.1.weight).then(a.0.cmp(&b.0)));
        hyps.truncate(cfg.max_hypotheses);
        hyps.sort_by_key(|h| h.0);
    }
    let mut hypotheses: Vec<GlobalHypothesis> = hyps.into_iter().map(|h| h.1).collect();
    normalise(&mut hypotheses);

    let poisson = PoissonIntensity {
        components: post.poisson.components.iter().map(|(w, d)| (w * (1.0 - p_d), *d)).collect(),
    };
    Ok(PmbmPosterior { poisson, hypotheses, bernoullis, next_label, time: post.time })
}

fn update_bernoulli(
    b: &Bernoulli,
    measurements: &[PolarPoint],
    r_cov: &nalgebra::Matrix2<f64>,
    cfg: &PmbmConfig,
) -> Result<BernoulliUpdate> {
    let ln_miss = (1.0 - b.r * cfg.p_d).ln();
    let Ok(pred) = PolarPrediction::new(&b.density, r_cov) else {
        return Ok(BernoulliUpdate { ln_miss, detections: vec![None; measurements.len()], gated: Vec::new() });
    };
    let Some(s_inv) = pred.innovation_cov.try_inverse() else {
        return Ok(BernoulliUpdate { ln_miss, detections: vec![None; measurements.len()], gated: Vec::new() });
    };
    let range_window = (cfg.gate * pred.innovation_cov[(0, 0)]).sqrt();
    let detections: Vec<Option<(StateDensity, f64)>> = measurements
        .iter()
        .map(|z| {
            if b.r <= 0.0 || (z.range - pred.z_pred.range).abs() > range_window {
                return Ok(None);
            }
            let nu = pred.innovation(z);
            if (nu.transpose() * s_inv * nu)[0] > cfg.gate {
                return Ok(None);
            }
            let (density, ll) = ekf_polar_update_with_cov(&b.density, z, r_cov)?;
            Ok(Some((density, b.r.ln() + cfg.p_d.ln() + ll)))
        })
        .collect::<Result<_>>()?;
    let gated = (0..detections.len()).filter(|&m| detections[m].is_some()).collect();
    Ok(BernoulliUpdate { ln_miss, detections, gated })
}

fn new_target(
    poisson: &PoissonIntensity,
    z: &PolarPoint,
    r_cov: &nalgebra::Matrix2<f64>,
    cfg: &PmbmConfig,
) -> Result<NewTarget> {
    let mut parts: Vec<(f64, StateDensity)> = Vec::new();
    for (w, d) in &poisson.components {
        let Ok(pred) = PolarPrediction::new(d, r_cov) else { continue };
        if pred.mahalanobis_sq(z)? > cfg.gate {
            continue;
        }
        let (density, ll) = ekf_polar_update_with_cov(d, z, r_cov)?;
        parts.push((w.ln() + cfg.p_d.ln() + ll, density));
    }
    let ln_clutter = polar_clutter_density(cfg, z.range).ln();
    if parts.is_empty() {
        return Ok(NewTarget { ln_weight: ln_clutter, bernoulli: None });
    }
    let ln_e = log_sum_exp(parts.iter().map(|p| p.0));
    let ln_weight = log_sum_exp([ln_e, ln_clutter]);
    let r = (ln_e - ln_weight).exp();
    let mut mean = Vector4::zeros();
    for (lw, d) in &parts {
        mean += (lw - ln_e).exp() * d.mean;
    }
    let mut cov = Matrix4::zeros();
    for (lw, d) in &parts {
        let dm = d.mean - mean;
        cov += (lw - ln_e).exp() * (d.cov + dm * dm.transpose());
    }
    let density = StateDensity::new(mean, crate::geometry::symmetrize4(&cov));
    Ok(NewTarget { ln_weight, bernoulli: (r > 0.0).then_some((r, density)) })
}

fn expand_hypothesis(
    h: &GlobalHypothesis,
    updates: &[BernoulliUpdate],
    new_targets: &[NewTarget],
    cfg: &PmbmConfig,
    seed: u64,
) -> Vec<Child> {
    let comps = &h.components;
    let n = comps.len();
    let m_total = new_targets.len();
    let mut row_of = vec![usize::MAX; m_total];
    let mut rows: Vec<usize> = Vec::new();
    for &b in comps {
        for &m in &updates[b].gated {
            if row_of[m] == usize::MAX {
                row_of[m] = 0;
                rows.push(m);
            }
        }
    }
    rows.sort_unstable();
    for (ri, &m) in rows.iter().enumerate() {
        row_of[m] = ri;
    }
    let mut base = h.weight.ln() + comps.iter().map(|&b| updates[b].ln_miss).sum::<f64>();
    for m in 0..m_total {
        if row_of[m] == usize::MAX {
            base += new_targets[m].ln_weight;
        }
    }
    let nrows = rows.len();
    let mut options: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nrows];
    for (ci, &b) in comps.iter().enumerate() {
        for &m in &updates[b].gated {
            let lw = updates[b].detections[m].as_ref().expect("gated").1;
            options[row_of[m]].push((ci, -(lw - updates[b].ln_miss)));
        }
    }
    for (ri, &m) in rows.iter().enumerate() {
        options[ri].push((n + ri, -new_targets[m].ln_weight));
    }
    let k = ((cfg.max_hypotheses as f64 * h.weight).ceil() as usize).max(1);
    kbest_sparse(&options, n + nrows, k, seed)
        .into_iter()
        .map(|a| {
            let mut detected_by = vec![None; n];
            let mut is_new = vec![true; m_total];
            for (ri, &col) in a.columns.iter().enumerate() {
                if col < n {
                    detected_by[col] = Some(rows[ri]);
                    is_new[rows[ri]] = false;
                }
            }
            let mut parts: Vec<ChildKey> = comps
                .iter()
                .zip(&detected_by)
                .map(|(&b, d)| match d {
                    Some(m) => (b, Association::Detected(*m)),
                    None => (b, Association::Missed),
                })
                .collect();
            for m in 0..m_total {
                if is_new[m] && new_targets[m].bernoulli.is_some() {
                    parts.push((usize::MAX, Association::New(m)));
                }
            }
            Child { ln_weight: base - a.cost, parts }
        })
        .collect()
}
