//! Track-before-detect on raw intensity frames with integrated existence.
//!
//! Each component carries a Gaussian state density, an existence
//! probability, and a Gamma prior on its Poisson measurement rate that is
//! conditioned on existence. Before each EM pass the Gamma/Exponential
//! mixture implied by the existence probability is collapsed to a single
//! Gamma by moment matching in `(E[lambda], E[ln lambda])`.

mod clutter;
mod em;

use nalgebra::{Matrix2, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::detect::Cluster;
use crate::error::{Error, Result};
use crate::geometry::{cv_predict, polar_jacobian, MeasurementModel, MotionModel, PolarPrediction, StateDensity, TargetState};
use crate::preprocess::FrameGeometry;
use crate::special::{digamma, exponential_ln_pdf, gamma_ln_pdf, log_add_exp, trigamma};

pub use clutter::{ClutterModel, ClutterProfile};
pub use em::{cell_mass, cell_mass_at, em_update, expected_counts, synthetic_measurement, CellMass, EmTrace, ExpectedCounts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TbdConfig {
    pub p_s: f64,
    pub p_b: f64,
    pub confirm_threshold: f64,
    pub terminate_threshold: f64,
    pub em_max_iters: usize,
    pub em_rel_tol: f64,
    pub gate_sigma: f64,
    /// Birth suppression radius around point-tracker estimates (m).
    pub epsilon: f64,
    pub alpha0: f64,
    pub beta0: f64,
    pub gamma0: f64,
    /// Gamma forgetting factor applied at each prediction.
    pub forgetting: f64,
    pub birth_position_std_cells: f64,
    pub birth_velocity_std: f64,
    /// Terminate components that come within `epsilon` of a point-tracker
    /// estimate.
    pub handoff: bool,
    pub clutter_profile: ClutterProfile,
}

impl Default for TbdConfig {
    fn default() -> Self {
        Self {
            p_s: 0.95,
            p_b: 1e-4,
            confirm_threshold: 0.5,
            terminate_threshold: 1e-3,
            em_max_iters: 1,
            em_rel_tol: 1e-6,
            gate_sigma: 6.0,
            epsilon: 100.0,
            alpha0: 20.0,
            beta0: 1.0,
            gamma0: 500.0,
            forgetting: 1.05,
            birth_position_std_cells: 2.0,
            birth_velocity_std: 5.0,
            handoff: true,
            clutter_profile: ClutterProfile::RowMedian,
        }
    }
}

impl TbdConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !(open(self.confirm_threshold) && open(self.terminate_threshold) && open(self.p_b)) {
            return Err(Error::Config("tbd: thresholds and p_b must be in (0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.p_s) || self.em_max_iters == 0 {
            return Err(Error::Config("tbd: p_s must be in [0,1] and em_max_iters >= 1".into()));
        }
        if !(self.alpha0 > 0.0 && self.beta0 > 0.0 && self.gamma0 > 0.0 && self.forgetting >= 1.0) {
            return Err(Error::Config("tbd: Gamma/Exponential parameters must be positive, forgetting >= 1".into()));
        }
        if !(self.gate_sigma > 0.0 && self.epsilon >= 0.0 && self.em_rel_tol >= 0.0) {
            return Err(Error::Config("tbd: gate, epsilon and tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TbdComponent {
    pub density: StateDensity,
    pub r: f64,
    /// Gamma shape of the rate prior given existence.
    pub alpha: f64,
    /// Gamma rate of the rate prior given existence.
    pub beta: f64,
    /// Exponential rate of the rate prior given non-existence.
    pub gamma_ne: f64,
    pub lambda_hat: f64,
    pub label: u64,
    pub confirmed: bool,
    pub birth_time: usize,
    /// Single-Gamma approximation of the mixture prior used by EM.
    pub prior_a: f64,
    pub prior_b: f64,
}

impl TbdComponent {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r) {
            return Err(Error::InvalidInput(format!("existence {} outside [0,1]", self.r)));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.gamma_ne > 0.0) {
            return Err(Error::InvalidInput("rate prior parameters must be positive".into()));
        }
        self.density.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TbdEstimate {
    pub label: u64,
    pub state: TargetState,
    pub r: f64,
    pub lambda_hat: f64,
}

const MERGE_MAX_ITERS: usize = 100;

/// Collapses `r Gamma(alpha, beta) + (1 - r) Exp(gamma)` to the Gamma with
/// the same `E[lambda]` and `E[ln lambda]`.
pub fn merge_existence_prior(r: f64, alpha: f64, beta: f64, gamma: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&r) || !(alpha > 0.0 && beta > 0.0 && gamma > 0.0) {
        return Err(Error::InvalidInput("merge needs r in [0,1] and positive parameters".into()));
    }
    if r == 1.0 {
        return Ok((alpha, beta));
    }
    if r == 0.0 {
        return Ok((1.0, gamma));
    }
    let mean = r * alpha / beta + (1.0 - r) / gamma;
    let mean_ln = r * (digamma(alpha) - beta.ln()) + (1.0 - r) * (digamma(1.0) - gamma.ln());
    let s = mean.ln() - mean_ln;
    if !(s > 0.0) {
        return Err(Error::NoConvergence { iterations: 0, residual: s });
    }
    // Newton on ln a - psi(a) = s in log a, from the standard closed-form start
    let mut a = (3.0 - s + ((s - 3.0).powi(2) + 24.0 * s).sqrt()) / (12.0 * s);
    let mut residual = f64::INFINITY;
    for _ in 0..MERGE_MAX_ITERS {
        let f = a.ln() - digamma(a) - s;
        residual = f.abs();
        if residual <= 1e-15 * s.max(1.0) {
            return Ok((a, a / mean));
        }
        let df = 1.0 - a * trigamma(a);
        let step = f / df;
        a *= (-step).exp().clamp(0.1, 10.0).max(f64::MIN_POSITIVE);
        if !a.is_finite() || a <= 0.0 {
            break;
        }
    }
    let f = a.ln() - digamma(a) - s;
    if f.abs() <= 1e-12 * s.max(1.0) {
        return Ok((a, a / mean));
    }
    Err(Error::NoConvergence { iterations: MERGE_MAX_ITERS, residual: residual.min(f.abs()) })
}

/// Conjugate rate update; the mode is clamped at zero when `a < 1`.
pub fn rate_map_update(alpha: f64, beta: f64, n_bar: f64) -> (f64, f64, f64) {
    let a = alpha + n_bar;
    let b = beta + 1.0;
    (a, b, ((a - 1.0) / b).max(0.0))
}

/// Posterior existence probability given the MAP rate.
pub fn existence_update(lambda_hat: f64, alpha: f64, beta: f64, gamma: f64, r_pred: f64) -> f64 {
    if r_pred <= 0.0 || r_pred >= 1.0 {
        return r_pred.clamp(0.0, 1.0);
    }
    let exists = gamma_ln_pdf(lambda_hat, alpha, beta) + r_pred.ln();
    let absent = exponential_ln_pdf(lambda_hat, gamma) + (1.0 - r_pred).ln();
    let norm = log_add_exp(exists, absent);
    if !norm.is_finite() {
        return if exists == f64::INFINITY && absent != f64::INFINITY { 1.0 } else { r_pred };
    }
    (exists - norm).exp().clamp(0.0, 1.0)
}

/// Prediction: survival, constant-velocity motion, Gamma forgetting and
/// prior merging.
pub fn tbd_predict(components: &[TbdComponent], model: &MotionModel, cfg: &TbdConfig) -> Result<Vec<TbdComponent>> {
    components
        .iter()
        .map(|c| {
            let mut c = c.clone();
            c.r *= cfg.p_s;
            c.density = cv_predict(&c.density, model)?;
            c.alpha /= cfg.forgetting;
            c.beta /= cfg.forgetting;
            let (a, b) = merge_existence_prior(c.r, c.alpha, c.beta, c.gamma_ne)
                .map_err(|e| Error::Component { id: c.label, source: Box::new(e) })?;
            c.prior_a = a;
            c.prior_b = b;
            Ok(c)
        })
        .collect()
}

fn birth_density(range: f64, azimuth: f64, geometry: &FrameGeometry, cfg: &TbdConfig) -> Result<StateDensity> {
    let (px, py) = crate::geometry::polar_to_cartesian(range, azimuth);
    let mean = Vector4::new(px, 0.0, py, 0.0);
    let jac = polar_jacobian(&mean)?;
    let pos_jac = Matrix2::new(jac[(0, 0)], jac[(0, 2)], jac[(1, 0)], jac[(1, 2)]);
    let inv = pos_jac.try_inverse().ok_or(Error::DegenerateGeometry)?;
    let sr = cfg.birth_position_std_cells * geometry.range_res;
    let sa = cfg.birth_position_std_cells * geometry.azimuth_res;
    let pos = inv * Matrix2::new(sr * sr, 0.0, 0.0, sa * sa) * inv.transpose();
    let vv = cfg.birth_velocity_std.powi(2);
    let mut cov = Matrix4::zeros();
    cov[(0, 0)] = pos[(0, 0)];
    cov[(0, 2)] = pos[(0, 1)];
    cov[(2, 0)] = pos[(1, 0)];
    cov[(2, 2)] = pos[(1, 1)];
    cov[(1, 1)] = vv;
    cov[(3, 3)] = vv;
    Ok(StateDensity::new(mean, crate::geometry::symmetrize4(&cov)))
}

fn within_gate(c: &TbdComponent, z: &crate::geometry::PolarPoint, mm: &MeasurementModel, gate_sigma: f64) -> bool {
    PolarPrediction::new(&c.density, &mm.covariance())
        .and_then(|p| p.mahalanobis_sq(z))
        .is_ok_and(|d2| d2 <= gate_sigma * gate_sigma)
}

/// New components at low-threshold clusters that are not already explained
/// by a point-tracker estimate (within `epsilon`) or an existing component
/// (within its gate).
#[allow(clippy::too_many_arguments)]
pub fn adaptive_birth(
    clusters: &[Cluster],
    pmbm_positions: &[(f64, f64)],
    existing: &[TbdComponent],
    geometry: &FrameGeometry,
    mm: &MeasurementModel,
    cfg: &TbdConfig,
    next_label: &mut u64,
    time: usize,
) -> Result<Vec<TbdComponent>> {
    let mut born: Vec<TbdComponent> = Vec::new();
    let mut sorted = clusters.to_vec();
    crate::detect::sort_clusters(&mut sorted);
    for cl in &sorted {
        let z = cl.centroid;
        let (bx, by) = z.to_cartesian();
        if pmbm_positions.iter().any(|&(px, py)| (px - bx).hypot(py - by) <= cfg.epsilon) {
            continue;
        }
        if existing.iter().chain(born.iter()).any(|c| within_gate(c, &z, mm, cfg.gate_sigma)) {
            continue;
        }
        let density = birth_density(z.range, z.azimuth, geometry, cfg)?;
        let (prior_a, prior_b) = merge_existence_prior(cfg.p_b, cfg.alpha0, cfg.beta0, cfg.gamma0)?;
        born.push(TbdComponent {
            density,
            r: cfg.p_b,
            alpha: cfg.alpha0,
            beta: cfg.beta0,
            gamma_ne: cfg.gamma0,
            lambda_hat: 0.0,
            label: *next_label,
            confirmed: false,
            birth_time: time,
            prior_a,
            prior_b,
        });
        *next_label += 1;
    }
    Ok(born)
}

/// Confirmation (sticky), termination, and optional hand-off to the point
/// tracker. Returns the estimates of confirmed survivors and the survivors.
pub fn tbd_manage(
    components: &[TbdComponent],
    pmbm_positions: &[(f64, f64)],
    cfg: &TbdConfig,
) -> (Vec<TbdEstimate>, Vec<TbdComponent>) {
    let mut survivors = Vec::with_capacity(components.len());
    for c in components {
        if c.r < cfg.terminate_threshold {
            continue;
        }
        if cfg.handoff {
            let (x, y) = c.density.position();
            if pmbm_positions.iter().any(|&(px, py)| (px - x).hypot(py - y) <= cfg.epsilon) {
                continue;
            }
        }
        let mut c = c.clone();
        if c.r > cfg.confirm_threshold {
            c.confirmed = true;
        }
        survivors.push(c);
    }
    let mut estimates: Vec<TbdEstimate> = survivors
        .iter()
        .filter(|c| c.confirmed)
        .map(|c| TbdEstimate { label: c.label, state: c.density.state(), r: c.r, lambda_hat: c.lambda_hat })
        .collect();
    estimates.sort_by_key(|e| e.label);
    (estimates, survivors)
}

#[cfg(test)]
mod tests;
