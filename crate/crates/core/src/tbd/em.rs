use std::ops::Range;

use nalgebra::{Cholesky, Matrix2, Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector4, U4};
use ndarray::Array2;
use rayon::prelude::*;

use super::{existence_update, rate_map_update, ClutterModel, TbdComponent, TbdConfig};
use crate::error::{Error, Result};
use crate::geometry::{polar_jacobian, position_to_polar, symmetrize4, wrap_angle, MeasurementModel, PolarPoint, StateDensity};
use crate::preprocess::{FrameGeometry, RadarFrame};
use crate::special::{gamma_ln_pdf, norm_interval, norm_pdf};

/// Cell integrals of a component's point-spread density over its gate.
///
/// The density is separable in range and azimuth, so masses and
/// conditional means are stored per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMass {
    pub rows: Range<usize>,
    pub cols: Vec<usize>,
    pub mass_r: Vec<f64>,
    pub mean_r: Vec<f64>,
    pub mass_a: Vec<f64>,
    /// Conditional azimuth means, unwrapped about the component azimuth.
    pub mean_a: Vec<f64>,
}

impl CellMass {
    pub fn empty() -> Self {
        Self { rows: 0..0, cols: Vec::new(), mass_r: Vec::new(), mean_r: Vec::new(), mass_a: Vec::new(), mean_a: Vec::new() }
    }

    pub fn total(&self) -> f64 {
        self.mass_r.iter().sum::<f64>() * self.mass_a.iter().sum::<f64>()
    }

    pub fn get(&self, cell: (usize, usize)) -> f64 {
        if !self.rows.contains(&cell.0) {
            return 0.0;
        }
        match self.cols.iter().position(|&j| j == cell.1) {
            Some(ci) => self.mass_r[cell.0 - self.rows.start] * self.mass_a[ci],
            None => 0.0,
        }
    }

    /// `((row, col), row offset, col offset, mass)` for every gated cell.
    fn cells(&self) -> impl Iterator<Item = ((usize, usize), usize, usize, f64)> + '_ {
        self.rows.clone().enumerate().flat_map(move |(ri, i)| {
            self.cols.iter().enumerate().map(move |(ci, &j)| ((i, j), ri, ci, self.mass_r[ri] * self.mass_a[ci]))
        })
    }
}

/// Mass and conditional mean of `N(mu, sigma^2)` on `[lo, hi]`.
fn truncated_moments(mu: f64, sigma: f64, lo: f64, hi: f64) -> (f64, f64) {
    let a = (lo - mu) / sigma;
    let b = (hi - mu) / sigma;
    let mass = norm_interval(a, b);
    let mean = if mass > 1e-300 { mu + sigma * (norm_pdf(a) - norm_pdf(b)) / mass } else { 0.5 * (lo + hi) };
    (mass, mean.clamp(lo, hi))
}

/// Gated cell integrals of `N(y; centre, diag(sigma_r^2, sigma_theta^2))`.
pub fn cell_mass_at(centre: &PolarPoint, g: &FrameGeometry, mm: &MeasurementModel, gate_sigma: f64) -> CellMass {
    let (sr, sa) = (mm.sigma_r, mm.sigma_theta);
    let lo_i = ((centre.range - gate_sigma * sr - g.range_offset) / g.range_res).floor();
    let hi_i = ((centre.range + gate_sigma * sr - g.range_offset) / g.range_res).ceil();
    let i0 = lo_i.max(0.0).min(g.n_range as f64) as usize;
    let i1 = hi_i.max(0.0).min(g.n_range as f64) as usize;
    if i0 >= i1 {
        return CellMass::empty();
    }
    let (mass_r, mean_r): (Vec<f64>, Vec<f64>) =
        (i0..i1).map(|i| truncated_moments(centre.range, sr, g.range_edge(i), g.range_edge(i + 1))).unzip();

    let span = g.n_azimuth as f64 * g.azimuth_res;
    let mid = g.azimuth_offset + 0.5 * span;
    let mu = mid + wrap_angle(centre.azimuth - mid);
    let lo_j = ((mu - gate_sigma * sa - g.azimuth_offset) / g.azimuth_res).floor() as i64;
    let hi_j = ((mu + gate_sigma * sa - g.azimuth_offset) / g.azimuth_res).ceil() as i64;
    let n = g.n_azimuth as i64;
    let (lo_j, hi_j) = if g.is_full_circle() {
        let extra = ((hi_j - lo_j) - n).max(0);
        (lo_j + extra / 2, hi_j - (extra - extra / 2))
    } else {
        (lo_j.max(0), hi_j.min(n))
    };
    let mut cols = Vec::new();
    let mut mass_a = Vec::new();
    let mut mean_a = Vec::new();
    for j in lo_j..hi_j {
        let lo = g.azimuth_offset + j as f64 * g.azimuth_res;
        let (m, c) = truncated_moments(mu, sa, lo, lo + g.azimuth_res);
        cols.push(j.rem_euclid(n) as usize);
        mass_a.push(m);
        mean_a.push(c);
    }
    if cols.is_empty() {
        return CellMass::empty();
    }
    CellMass { rows: i0..i1, cols, mass_r, mean_r, mass_a, mean_a }
}

/// Cell integrals about the component's predicted measurement.
pub fn cell_mass(c: &TbdComponent, g: &FrameGeometry, mm: &MeasurementModel, gate_sigma: f64) -> CellMass {
    match position_to_polar(c.density.mean[0], c.density.mean[2]) {
        Ok(z) => cell_mass_at(&z, g, mm, gate_sigma),
        Err(_) => CellMass::empty(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedCounts {
    pub n_bar: Vec<f64>,
    pub n_clutter: f64,
    /// Total intensity over the union of gates.
    pub support_intensity: f64,
}

/// Total expected intensity per cell over the union of gates.
struct Support {
    nu: Array2<f64>,
    covered: Array2<bool>,
    cells: Vec<(usize, usize)>,
}

impl Support {
    fn new(shape: (usize, usize)) -> Self {
        Self { nu: Array2::zeros(shape), covered: Array2::from_elem(shape, false), cells: Vec::new() }
    }

    fn rebuild(&mut self, masses: &[CellMass], lambdas: &[f64], clutter: &ClutterModel) {
        for &c in &self.cells {
            self.nu[c] = 0.0;
            self.covered[c] = false;
        }
        self.cells.clear();
        for (m, &lam) in masses.iter().zip(lambdas) {
            for (cell, _, _, g) in m.cells() {
                if !self.covered[cell] {
                    self.covered[cell] = true;
                    self.cells.push(cell);
                }
                self.nu[cell] += lam * g;
            }
        }
        self.cells.sort_unstable();
        for &c in &self.cells {
            self.nu[c] += clutter.cell_rate(c);
        }
    }

    fn counts(&self, frame: &RadarFrame, masses: &[CellMass], lambdas: &[f64], clutter: &ClutterModel) -> ExpectedCounts {
        let z = &frame.intensities;
        let n_bar = masses
            .iter()
            .zip(lambdas)
            .map(|(m, &lam)| {
                m.cells()
                    .map(|(cell, _, _, g)| {
                        let nu = self.nu[cell];
                        if nu > 0.0 { z[cell] * lam * g / nu } else { 0.0 }
                    })
                    .sum()
            })
            .collect();
        let (mut n_clutter, mut support) = (0.0, 0.0);
        for &c in &self.cells {
            support += z[c];
            let nu = self.nu[c];
            if nu > 0.0 {
                n_clutter += z[c] * clutter.cell_rate(c) / nu;
            }
        }
        ExpectedCounts { n_bar, n_clutter, support_intensity: support }
    }
}

/// Expected count attributed to each component and to clutter.
pub fn expected_counts(frame: &RadarFrame, masses: &[CellMass], lambdas: &[f64], clutter: &ClutterModel) -> Result<ExpectedCounts> {
    if masses.len() != lambdas.len() || clutter.cell_density.dim() != frame.shape() {
        return Err(Error::InvalidInput("expected_counts: inconsistent inputs".into()));
    }
    let mut s = Support::new(frame.shape());
    s.rebuild(masses, lambdas, clutter);
    Ok(s.counts(frame, masses, lambdas, clutter))
}

/// Intensity-weighted conditional mean of the component's share of the
/// frame and the matching covariance `R / n_bar`. `None` when nothing is
/// attributed to the component.
pub fn synthetic_measurement(
    frame: &RadarFrame,
    mass: &CellMass,
    lambda: f64,
    nu: &Array2<f64>,
    mm: &MeasurementModel,
) -> Option<(PolarPoint, Matrix2<f64>, f64)> {
    let z = &frame.intensities;
    let (mut w_sum, mut r_sum, mut a_sum) = (0.0, 0.0, 0.0);
    for (cell, ri, ci, g) in mass.cells() {
        let n = nu[cell];
        if n <= 0.0 {
            continue;
        }
        let w = z[cell] * lambda * g / n;
        w_sum += w;
        r_sum += w * mass.mean_r[ri];
        a_sum += w * mass.mean_a[ci];
    }
    if !(w_sum > 0.0) || !w_sum.is_finite() {
        return None;
    }
    let zt = PolarPoint { range: r_sum / w_sum, azimuth: a_sum / w_sum };
    Some((zt, mm.covariance() / w_sum, w_sum))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmTrace {
    /// MAP objective before the first and after every iteration.
    pub objective: Vec<f64>,
    /// Per iteration: total attributed count including clutter.
    pub attributed: Vec<f64>,
    /// Per iteration: total intensity over the union of gates.
    pub support: Vec<f64>,
    pub iterations: usize,
}

struct StatePrior {
    density: StateDensity,
    chol: Cholesky<f64, U4>,
    ln_norm: f64,
}

impl StatePrior {
    fn new(density: StateDensity, id: u64) -> Result<Self> {
        let chol = Cholesky::new(density.cov).ok_or_else(|| Error::Component {
            id,
            source: Box::new(Error::SingularCovariance { condition: f64::INFINITY }),
        })?;
        let ln_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let ln_norm = -0.5 * (4.0 * (2.0 * std::f64::consts::PI).ln() + ln_det);
        Ok(Self { density, chol, ln_norm })
    }

    fn ln_pdf(&self, x: &Vector4<f64>) -> f64 {
        let d = x - self.density.mean;
        self.ln_norm - 0.5 * d.dot(&self.chol.solve(&d))
    }
}

fn polar_h(x: &Vector4<f64>) -> Option<(Vector2<f64>, Matrix2x4<f64>)> {
    let z = position_to_polar(x[0], x[2]).ok()?;
    let h = polar_jacobian(x).ok()?;
    Some((Vector2::new(z.range, z.azimuth), h))
}

fn innovation(zt: &PolarPoint, hx: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(zt.range - hx[0], wrap_angle(zt.azimuth - hx[1]))
}

/// State part of the auxiliary function (up to a constant).
fn state_objective(prior: &StatePrior, x: &Vector4<f64>, zt: &PolarPoint, r_inv: &Matrix2<f64>) -> f64 {
    match polar_h(x) {
        Some((hx, _)) => {
            let nu = innovation(zt, &hx);
            prior.ln_pdf(x) - 0.5 * (nu.transpose() * r_inv * nu)[0]
        }
        None => f64::NEG_INFINITY,
    }
}

/// One Gauss-Newton step from `x_old` on the state objective, backtracked
/// so that the objective does not decrease.
fn state_m_step(prior: &StatePrior, x_old: &Vector4<f64>, zt: &PolarPoint, r_t: &Matrix2<f64>) -> Vector4<f64> {
    let Some(r_inv) = r_t.try_inverse() else { return *x_old };
    let Some((hx, h)) = polar_h(x_old) else { return *x_old };
    let p = &prior.density.cov;
    let s = h * p * h.transpose() + r_t;
    let Some(s_inv) = s.try_inverse() else { return *x_old };
    let k: Matrix4x2<f64> = p * h.transpose() * s_inv;
    let target = prior.density.mean + k * (innovation(zt, &hx) + h * (x_old - prior.density.mean));
    let j_old = state_objective(prior, x_old, zt, &r_inv);
    let mut t = 1.0;
    for _ in 0..40 {
        let x = x_old + t * (target - x_old);
        if state_objective(prior, &x, zt, &r_inv) >= j_old {
            return x;
        }
        t *= 0.5;
    }
    *x_old
}

fn posterior_cov(prior: &StateDensity, x: &Vector4<f64>, r_t: &Matrix2<f64>) -> Option<Matrix4<f64>> {
    let (_, h) = polar_h(x)?;
    let p = &prior.cov;
    let s = h * p * h.transpose() + r_t;
    let k: Matrix4x2<f64> = p * h.transpose() * s.try_inverse()?;
    let i_kh = Matrix4::identity() - k * h;
    Some(symmetrize4(&(i_kh * p * i_kh.transpose() + k * r_t * k.transpose())))
}

/// EM over one frame for all components jointly.
///
/// Rates start at the mean of each component's existence-conditioned
/// Gamma; the rate M-step uses the merged prior `(prior_a, prior_b)`. On
/// return each component carries its MAP rate and state, the conditioned
/// Gamma posterior and the updated existence probability.
pub fn em_update(
    components: &[TbdComponent],
    frame: &RadarFrame,
    clutter: &mut ClutterModel,
    mm: &MeasurementModel,
    cfg: &TbdConfig,
) -> Result<(Vec<TbdComponent>, EmTrace)> {
    let g = &frame.geometry;
    let shape = frame.shape();
    if clutter.cell_density.dim() != shape {
        return Err(Error::ShapeMismatch { expected: shape, actual: clutter.cell_density.dim() });
    }
    let priors: Vec<StatePrior> =
        components.iter().map(|c| StatePrior::new(c.density, c.label)).collect::<Result<_>>()?;
    let mut xs: Vec<Vector4<f64>> = components.iter().map(|c| c.density.mean).collect();
    let mut lambdas: Vec<f64> = components.iter().map(|c| c.alpha / c.beta).collect();
    let z = &frame.intensities;

    let masses_at = |xs: &[Vector4<f64>]| -> Vec<CellMass> {
        xs.par_iter()
            .map(|x| match position_to_polar(x[0], x[2]) {
                Ok(p) => cell_mass_at(&p, g, mm, cfg.gate_sigma),
                Err(_) => CellMass::empty(),
            })
            .collect()
    };

    let mut masses = masses_at(&xs);
    let mut support = Support::new(shape);
    support.rebuild(&masses, &lambdas, clutter);
    clutter.estimate_rate(frame, &support.covered);
    support.rebuild(&masses, &lambdas, clutter);

    let ln_c = clutter.cell_density.mapv(|d| if d > 0.0 { (clutter.lambda0 * d).ln() } else { 0.0 });
    let base: f64 = z.iter().zip(ln_c.iter()).map(|(&zi, &l)| if zi > 0.0 { zi * l } else { 0.0 }).sum();
    let objective = |xs: &[Vector4<f64>], lambdas: &[f64], support: &Support| -> f64 {
        let mut f = base - clutter.lambda0 * clutter.cell_density.sum();
        for &c in &support.cells {
            if z[c] > 0.0 {
                f += z[c] * (support.nu[c].ln() - ln_c[c]);
            }
        }
        for ((comp, prior), (x, &lam)) in components.iter().zip(&priors).zip(xs.iter().zip(lambdas)) {
            f += prior.ln_pdf(x) + gamma_ln_pdf(lam, comp.prior_a, comp.prior_b) - lam;
        }
        f
    };

    let mut trace = EmTrace { objective: vec![objective(&xs, &lambdas, &support)], ..Default::default() };
    let mut last_counts = vec![0.0; components.len()];
    let mut last_synth: Vec<Option<(PolarPoint, Matrix2<f64>, f64)>> = vec![None; components.len()];

    for _ in 0..cfg.em_max_iters {
        let counts = support.counts(frame, &masses, &lambdas, clutter);
        trace.attributed.push(counts.n_bar.iter().sum::<f64>() + counts.n_clutter);
        trace.support.push(counts.support_intensity);

        let synth: Vec<_> = masses
            .par_iter()
            .zip(lambdas.par_iter())
            .map(|(m, &lam)| synthetic_measurement(frame, m, lam, &support.nu, mm))
            .collect();
        let new_x: Vec<Vector4<f64>> = (0..components.len())
            .into_par_iter()
            .map(|m| match &synth[m] {
                Some((zt, r_t, _)) => state_m_step(&priors[m], &xs[m], zt, r_t),
                None => priors[m].density.mean,
            })
            .collect();
        lambdas = components
            .iter()
            .zip(&counts.n_bar)
            .map(|(c, &n)| rate_map_update(c.prior_a, c.prior_b, n).2)
            .collect();
        xs = new_x;
        last_counts = counts.n_bar;
        last_synth = synth;

        masses = masses_at(&xs);
        support.rebuild(&masses, &lambdas, clutter);
        let f_new = objective(&xs, &lambdas, &support);
        let f_old = *trace.objective.last().expect("seeded");
        trace.objective.push(f_new);
        trace.iterations += 1;
        if (f_new - f_old).abs() <= cfg.em_rel_tol * f_old.abs().max(1.0) {
            break;
        }
    }

    let out = components
        .iter()
        .enumerate()
        .map(|(m, c)| {
            let mut c = c.clone();
            let n_bar = last_counts[m];
            let x = xs[m];
            if let Some((_, r_t, _)) = &last_synth[m] {
                let cov = posterior_cov(&priors[m].density, &x, r_t)
                    .ok_or_else(|| Error::Component { id: c.label, source: Box::new(Error::DegenerateGeometry) })?;
                c.density = StateDensity::new(x, cov);
            }
            c.lambda_hat = lambdas[m];
            c.r = existence_update(c.lambda_hat, c.alpha, c.beta, c.gamma_ne, c.r);
            c.alpha += n_bar;
            c.beta += 1.0;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, trace))
}
