//! Poisson multi-Bernoulli mixture tracker over point measurements.
//!
//! The posterior keeps a pool of Bernoulli components; each global
//! hypothesis selects a subset of the pool. Weights are kept normalised.

mod update;

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cv_predict, polar_jacobian, FieldOfView, MeasurementModel, MotionModel, StateDensity, TargetState};

pub use update::pmbm_update;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PmbmConfig {
    pub p_s: f64,
    pub p_d: f64,
    /// Clutter intensity per square metre.
    pub clutter_intensity: f64,
    pub birth_weight: f64,
    /// Squared Mahalanobis gate in measurement space.
    pub gate: f64,
    pub max_hypotheses: usize,
    pub prune_bernoulli: f64,
    pub prune_poisson: f64,
    pub estimate_threshold: f64,
    /// Birth grid as (range tiles, azimuth tiles).
    pub birth_grid: (usize, usize),
    /// Per-axis velocity standard deviation of birth components (m/s).
    pub birth_velocity_std: f64,
}

impl Default for PmbmConfig {
    fn default() -> Self {
        Self {
            p_s: 0.999,
            p_d: 0.9,
            clutter_intensity: 1e-6,
            birth_weight: 0.1,
            gate: 30.0,
            max_hypotheses: 200,
            prune_bernoulli: 1e-4,
            prune_poisson: 1e-5,
            estimate_threshold: 0.5,
            birth_grid: (8, 8),
            birth_velocity_std: 10.0,
        }
    }
}

impl PmbmConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        if !(prob(self.p_s) && self.p_d > 0.0 && self.p_d < 1.0) {
            return Err(Error::Config("pmbm: p_s must be in [0,1] and p_d in (0,1)".into()));
        }
        if !(self.clutter_intensity > 0.0 && self.birth_weight >= 0.0 && self.gate > 0.0) {
            return Err(Error::Config("pmbm: clutter, birth weight and gate must be positive".into()));
        }
        if self.max_hypotheses == 0 || self.birth_grid.0 == 0 || self.birth_grid.1 == 0 {
            return Err(Error::Config("pmbm: hypothesis cap and birth grid must be non-zero".into()));
        }
        if !(prob(self.prune_bernoulli) && self.prune_poisson >= 0.0 && prob(self.estimate_threshold)) {
            return Err(Error::Config("pmbm: thresholds out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bernoulli {
    pub r: f64,
    pub density: StateDensity,
    pub label: u64,
    pub birth_time: usize,
}

/// Outcome of the latest update for one component of a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Association {
    /// Carried over with no update applied (e.g. after prediction).
    Unchanged,
    Missed,
    Detected(usize),
    /// Created from the given measurement.
    New(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalHypothesis {
    pub weight: f64,
    /// Pool indices, ascending.
    pub components: Vec<usize>,
    /// Latest association, parallel to `components`.
    pub associations: Vec<Association>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoissonIntensity {
    pub components: Vec<(f64, StateDensity)>,
}

impl PoissonIntensity {
    pub fn total_weight(&self) -> f64 {
        self.components.iter().map(|c| c.0).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmbmPosterior {
    pub poisson: PoissonIntensity,
    pub hypotheses: Vec<GlobalHypothesis>,
    pub bernoullis: Vec<Bernoulli>,
    pub next_label: u64,
    pub time: usize,
}

impl Default for PmbmPosterior {
    fn default() -> Self {
        Self::new()
    }
}

impl PmbmPosterior {
    /// Empty posterior with one empty hypothesis.
    pub fn new() -> Self {
        Self {
            poisson: PoissonIntensity::default(),
            hypotheses: vec![GlobalHypothesis { weight: 1.0, components: Vec::new(), associations: Vec::new() }],
            bernoullis: Vec::new(),
            next_label: 1,
            time: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hypotheses.is_empty() {
            return Err(Error::InvalidInput("posterior has no hypotheses".into()));
        }
        let total: f64 = self.hypotheses.iter().map(|h| h.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("hypothesis weights sum to {total}")));
        }
        for h in &self.hypotheses {
            if h.components.iter().any(|&i| i >= self.bernoullis.len()) || h.components.len() != h.associations.len() {
                return Err(Error::InvalidInput("hypothesis references a missing component".into()));
            }
        }
        if self.bernoullis.iter().any(|b| !(0.0..=1.0).contains(&b.r)) {
            return Err(Error::InvalidInput("existence probability outside [0,1]".into()));
        }
        Ok(())
    }

    /// Index of the highest-weight hypothesis, lowest index on ties.
    pub fn best_hypothesis(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, h) in self.hypotheses.iter().enumerate() {
            if best.is_none_or(|b| h.weight > self.hypotheses[b].weight) {
                best = Some(i);
            }
        }
        best
    }
}

/// Birth intensity: a grid of broad Gaussians tiling the field of view,
/// zero mean velocity, total weight `cfg.birth_weight`.
pub fn birth_components(fov: &FieldOfView, cfg: &PmbmConfig) -> Result<Vec<(f64, StateDensity)>> {
    let (nr, na) = cfg.birth_grid;
    let dr = (fov.range_max - fov.range_min) / nr as f64;
    let da = (fov.azimuth_max - fov.azimuth_min) / na as f64;
    let w = cfg.birth_weight / (nr * na) as f64;
    let vel_var = cfg.birth_velocity_std.powi(2);
    let mut out = Vec::with_capacity(nr * na);
    for i in 0..nr {
        for j in 0..na {
            let range = fov.range_min + (i as f64 + 0.5) * dr;
            let az = fov.azimuth_min + (j as f64 + 0.5) * da;
            let (px, py) = crate::geometry::polar_to_cartesian(range, az);
            let mean = Vector4::new(px, 0.0, py, 0.0);
            // polar tile half-widths mapped to Cartesian position covariance
            let jac = polar_jacobian(&mean)?;
            let pos_jac = nalgebra::Matrix2::new(jac[(0, 0)], jac[(0, 2)], jac[(1, 0)], jac[(1, 2)]);
            let inv = pos_jac.try_inverse().ok_or(Error::DegenerateGeometry)?;
            let polar_cov = nalgebra::Matrix2::new((0.5 * dr).powi(2), 0.0, 0.0, (0.5 * da).powi(2));
            let pos_cov = inv * polar_cov * inv.transpose();
            let mut cov = Matrix4::zeros();
            cov[(0, 0)] = pos_cov[(0, 0)];
            cov[(0, 2)] = pos_cov[(0, 1)];
            cov[(2, 0)] = pos_cov[(1, 0)];
            cov[(2, 2)] = pos_cov[(1, 1)];
            cov[(1, 1)] = vel_var;
            cov[(3, 3)] = vel_var;
            out.push((w, StateDensity::new(mean, crate::geometry::symmetrize4(&cov))));
        }
    }
    Ok(out)
}

/// Prediction: survival thinning, constant-velocity propagation and birth.
pub fn pmbm_predict(
    post: &PmbmPosterior,
    model: &MotionModel,
    fov: &FieldOfView,
    cfg: &PmbmConfig,
) -> Result<PmbmPosterior> {
    let mut out = post.clone();
    for b in &mut out.bernoullis {
        b.r *= cfg.p_s;
        b.density = cv_predict(&b.density, model)?;
    }
    for (w, d) in &mut out.poisson.components {
        *w *= cfg.p_s;
        *d = cv_predict(d, model)?;
    }
    if cfg.birth_weight > 0.0 {
        out.poisson.components.extend(birth_components(fov, cfg)?);
    }
    for h in &mut out.hypotheses {
        h.associations.iter_mut().for_each(|a| *a = Association::Unchanged);
    }
    out.time += 1;
    Ok(out)
}

/// Caps the hypothesis count, drops weak and orphaned Bernoullis and weak
/// Poisson components, and renormalises.
pub fn pmbm_prune(post: &PmbmPosterior, cfg: &PmbmConfig) -> Result<PmbmPosterior> {
    let mut order: Vec<usize> = (0..post.hypotheses.len()).filter(|&i| post.hypotheses[i].weight > 0.0).collect();
    order.sort_by(|&a, &b| post.hypotheses[b].weight.total_cmp(&post.hypotheses[a].weight).then(a.cmp(&b)));
    order.truncate(cfg.max_hypotheses);
    order.sort_unstable();

    // drop weak components, then merge hypotheses that became identical
    let mut merged: Vec<GlobalHypothesis> = Vec::new();
    let mut seen: HashMap<Vec<usize>, usize> = HashMap::new();
    for &i in &order {
        let h = &post.hypotheses[i];
        let (components, associations): (Vec<usize>, Vec<Association>) = h
            .components
            .iter()
            .zip(&h.associations)
            .filter(|(&c, _)| post.bernoullis[c].r >= cfg.prune_bernoulli)
            .map(|(&c, &a)| (c, a))
            .unzip();
        match seen.get(&components) {
            Some(&k) => merged[k].weight += h.weight,
            None => {
                seen.insert(components.clone(), merged.len());
                merged.push(GlobalHypothesis { weight: h.weight, components, associations });
            }
        }
    }
    if merged.is_empty() {
        merged.push(GlobalHypothesis { weight: 1.0, components: Vec::new(), associations: Vec::new() });
    }

    let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
    for h in &merged {
        for &c in &h.components {
            remap.insert(c, 0);
        }
    }
    let mut bernoullis = Vec::with_capacity(remap.len());
    for (old, new) in remap.iter_mut() {
        *new = bernoullis.len();
        bernoullis.push(post.bernoullis[*old].clone());
    }
    for h in &mut merged {
        h.components.iter_mut().for_each(|c| *c = remap[c]);
    }
    normalise(&mut merged);

    let poisson = PoissonIntensity {
        components: post.poisson.components.iter().filter(|c| c.0 >= cfg.prune_poisson).cloned().collect(),
    };
    Ok(PmbmPosterior { poisson, hypotheses: merged, bernoullis, next_label: post.next_label, time: post.time })
}

pub(crate) fn normalise(hyps: &mut [GlobalHypothesis]) {
    let total: f64 = hyps.iter().map(|h| h.weight).sum();
    if total > 0.0 {
        hyps.iter_mut().for_each(|h| h.weight /= total);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackEstimate {
    pub label: u64,
    pub state: TargetState,
    pub r: f64,
}

/// Confident Bernoullis of the highest-weight hypothesis, ordered by label.
pub fn pmbm_estimate(post: &PmbmPosterior, cfg: &PmbmConfig) -> Vec<TrackEstimate> {
    let Some(best) = post.best_hypothesis() else {
        return Vec::new();
    };
    let mut out: Vec<TrackEstimate> = post.hypotheses[best]
        .components
        .iter()
        .map(|&c| &post.bernoullis[c])
        .filter(|b| b.r > cfg.estimate_threshold)
        .map(|b| TrackEstimate { label: b.label, state: b.density.state(), r: b.r })
        .collect();
    out.sort_by_key(|e| e.label);
    out
}

/// Predicted-measurement clutter density in polar coordinates at `range`.
pub(crate) fn polar_clutter_density(cfg: &PmbmConfig, range: f64) -> f64 {
    cfg.clutter_intensity * range
}

pub(crate) fn measurement_model_ok(mm: &MeasurementModel) -> Result<()> {
    if mm.sigma_r > 0.0 && mm.sigma_theta > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput("measurement noise must be positive".into()))
    }
}
