//! Synthetic range-azimuth scenes: waypoint trajectories, Gaussian
//! point-spread target returns, range-dependent clutter and land.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{position_to_polar, MeasurementModel, PolarPoint};
use crate::metrics::{write_truth_csv, GroundTruthTrack};
use crate::preprocess::container::{frame_stem, write_frame};
use crate::preprocess::{FrameGeometry, RadarFrame};
use crate::tbd::{cell_mass_at, CellMass};

const SPREAD_GATE_SIGMA: f64 = 8.0;
const STREAM_TARGET: u64 = 1 << 23;
const CALIBRATION_KEY: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClutterSpec {
    /// Mean per-cell clutter power at the innermost range row.
    pub mean: f64,
    /// Radial decay length in metres; defaults to a third of the maximum range.
    #[serde(default)]
    pub r0: Option<f64>,
    /// Texture shape for K-distributed clutter; exponential when absent.
    #[serde(default)]
    pub k_shape: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub id: u64,
    #[serde(default)]
    pub birth: usize,
    /// Last frame in which the target exists; defaults to the final frame.
    #[serde(default)]
    pub death: Option<usize>,
    /// Cartesian waypoints in metres, visited in order at constant speed.
    pub waypoints: Vec<[f64; 2]>,
    #[serde(default)]
    pub speed: f64,
    /// Peak-cell SNR in dB at birth.
    #[serde(default)]
    pub snr_db: Option<f64>,
    /// Peak-cell SNR in dB at death, ramped linearly in dB.
    #[serde(default)]
    pub snr_end_db: Option<f64>,
    /// Integrated return per frame, used instead of an SNR.
    #[serde(default)]
    pub rate: Option<f64>,
    #[serde(default)]
    pub fading: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandRegion {
    /// Cartesian polygon vertices in metres.
    pub polygon: Vec<[f64; 2]>,
    pub level: f64,
    /// Relative standard deviation of the land return.
    #[serde(default = "default_land_noise")]
    pub noise: f64,
}

fn default_land_noise() -> f64 {
    0.1
}

fn default_dt() -> f64 {
    2.5
}

fn default_calibration_frames() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub frames: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub radar: FrameGeometry,
    #[serde(default)]
    pub point_spread: MeasurementModel,
    pub clutter: ClutterSpec,
    #[serde(default)]
    pub targets: Vec<TargetSpec>,
    #[serde(default)]
    pub land: Vec<LandRegion>,
    #[serde(default = "default_calibration_frames")]
    pub calibration_frames: usize,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.radar.validate()?;
        MeasurementModel::new(self.point_spread.sigma_r, self.point_spread.sigma_theta)?;
        if self.frames == 0 {
            return Err(Error::Config("scenario needs at least one frame".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("frame interval must be positive".into()));
        }
        if !(self.clutter.mean >= 0.0) || self.clutter.r0.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::Config("clutter mean must be >= 0 and r0 > 0".into()));
        }
        if self.clutter.k_shape.is_some_and(|v| !(v > 0.0)) {
            return Err(Error::Config("clutter texture shape must be positive".into()));
        }
        for t in &self.targets {
            if t.waypoints.is_empty() || !(t.speed >= 0.0) {
                return Err(Error::Config(format!("target {}: needs waypoints and speed >= 0", t.id)));
            }
            if t.rate.is_some() == t.snr_db.is_some() {
                return Err(Error::Config(format!("target {}: give exactly one of snr_db and rate", t.id)));
            }
            if t.rate.is_some_and(|r| !(r >= 0.0)) {
                return Err(Error::Config(format!("target {}: rate must be >= 0", t.id)));
            }
            if t.birth >= self.frames || t.death.is_some_and(|d| d < t.birth || d >= self.frames) {
                return Err(Error::Config(format!("target {}: lifetime outside the scenario", t.id)));
            }
        }
        for l in &self.land {
            if l.polygon.len() < 3 || !(l.level >= 0.0 && l.noise >= 0.0) {
                return Err(Error::Config("land polygons need >= 3 vertices and non-negative level".into()));
            }
        }
        Ok(())
    }

    pub fn r0(&self) -> f64 {
        self.clutter.r0.unwrap_or(self.radar.max_range() / 3.0)
    }

    /// Mean clutter power of range row `i`.
    pub fn clutter_mean(&self, i: usize) -> f64 {
        let g = &self.radar;
        self.clutter.mean * (-(g.range_center(i) - g.range_center(0)) / self.r0()).exp()
    }

    /// Expected clutter power over the whole frame.
    pub fn clutter_total(&self) -> f64 {
        (0..self.radar.n_range).map(|i| self.clutter_mean(i)).sum::<f64>() * self.radar.n_azimuth as f64
    }

    pub fn death(&self, t: &TargetSpec) -> usize {
        t.death.unwrap_or(self.frames - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTruth {
    pub tracks: Vec<GroundTruthTrack>,
    /// `alive[k][m]` for frame `k` and target `m` in config order.
    pub alive: Vec<Vec<bool>>,
    /// Polar position of each target per frame, `None` when not alive.
    pub positions: Vec<Vec<Option<PolarPoint>>>,
}

fn trajectory_position(t: &TargetSpec, elapsed: f64) -> (f64, f64) {
    let w = &t.waypoints;
    let mut remaining = t.speed * elapsed;
    for seg in w.windows(2) {
        let (dx, dy) = (seg[1][0] - seg[0][0], seg[1][1] - seg[0][1]);
        let len = dx.hypot(dy);
        if remaining <= len {
            let f = if len > 0.0 { remaining / len } else { 0.0 };
            return (seg[0][0] + f * dx, seg[0][1] + f * dy);
        }
        remaining -= len;
    }
    let last = w[w.len() - 1];
    match w.len() {
        1 => (last[0], last[1]),
        n => {
            let prev = w[n - 2];
            let (dx, dy) = (last[0] - prev[0], last[1] - prev[1]);
            let len = dx.hypot(dy);
            if len > 0.0 {
                (last[0] + remaining * dx / len, last[1] + remaining * dy / len)
            } else {
                (last[0], last[1])
            }
        }
    }
}

/// Truth trajectories sampled once per frame.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<ScenarioTruth> {
    cfg.validate()?;
    let fov = cfg.radar.field_of_view();
    let mut alive = vec![vec![false; cfg.targets.len()]; cfg.frames];
    let mut positions = vec![vec![None; cfg.targets.len()]; cfg.frames];
    let mut tracks = Vec::with_capacity(cfg.targets.len());
    for (m, t) in cfg.targets.iter().enumerate() {
        let mut samples = Vec::new();
        for k in t.birth..=cfg.death(t) {
            let (px, py) = trajectory_position(t, (k - t.birth) as f64 * cfg.dt);
            let p = position_to_polar(px, py)
                .ok()
                .filter(|p| fov.contains(p))
                .ok_or_else(|| Error::Config(format!("target {} leaves the field of view at frame {k}", t.id)))?;
            alive[k][m] = true;
            positions[k][m] = Some(p);
            samples.push((k as f64 * cfg.dt, px, py));
        }
        tracks.push(GroundTruthTrack { id: t.id, samples });
    }
    Ok(ScenarioTruth { tracks, alive, positions })
}

fn stream_rng(key: u64, k: usize, entity: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(((k as u64) << 24) | entity);
    rng
}

/// Point-spread cell masses of a target at `p`.
pub fn target_spread(p: &PolarPoint, cfg: &ScenarioConfig) -> CellMass {
    cell_mass_at(p, &cfg.radar, &cfg.point_spread, SPREAD_GATE_SIGMA)
}

fn peak_mass(mass: &CellMass) -> f64 {
    let mr = mass.mass_r.iter().copied().fold(0.0, f64::max);
    let ma = mass.mass_a.iter().copied().fold(0.0, f64::max);
    mr * ma
}

/// Peak-cell SNR in linear units for target `t` at frame `k`.
pub fn target_snr(t: &TargetSpec, k: usize, cfg: &ScenarioConfig) -> f64 {
    let Some(start) = t.snr_db else { return 0.0 };
    let end = t.snr_end_db.unwrap_or(start);
    let span = cfg.death(t).saturating_sub(t.birth);
    let f = if span > 0 { (k.saturating_sub(t.birth)) as f64 / span as f64 } else { 0.0 };
    10f64.powf((start + f * (end - start)) / 10.0)
}

/// Integrated target return at frame `k`, before fading.
pub fn target_rate(t: &TargetSpec, p: &PolarPoint, k: usize, cfg: &ScenarioConfig) -> f64 {
    if let Some(rate) = t.rate {
        return rate;
    }
    let mass = target_spread(p, cfg);
    let peak = peak_mass(&mass);
    let Some((i, _)) = cfg.radar.cell_of(p) else { return 0.0 };
    if peak <= 0.0 {
        return 0.0;
    }
    target_snr(t, k, cfg) * cfg.clutter_mean(i) / peak
}

fn point_in_polygon(x: f64, y: f64, poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn clutter_rows(cfg: &ScenarioConfig, key: u64, k: usize) -> Array2<f64> {
    let g = &cfg.radar;
    let texture = cfg.clutter.k_shape.map(|v| Gamma::new(v, 1.0 / v).expect("validated shape"));
    let mut out = Array2::zeros(g.shape());
    out.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(i, mut row)| {
        let mut rng = stream_rng(key, k, i as u64);
        let mean = cfg.clutter_mean(i);
        for j in 0..g.n_azimuth {
            let speckle: f64 = Exp1.sample(&mut rng);
            let tex = texture.as_ref().map_or(1.0, |d| d.sample(&mut rng));
            let mut v = mean * speckle * tex;
            let c = g.cell_center(i, j);
            let (x, y) = c.to_cartesian();
            if let Some(l) = cfg.land.iter().find(|l| point_in_polygon(x, y, &l.polygon)) {
                let n: f64 = StandardNormal.sample(&mut rng);
                v = (l.level * (1.0 + l.noise * n)).max(0.0);
            }
            row[j] = v;
        }
    });
    out
}

/// Renders frame `k` of the scenario.
pub fn render_frame(truth: &ScenarioTruth, k: usize, cfg: &ScenarioConfig) -> Result<RadarFrame> {
    if k >= cfg.frames {
        return Err(Error::InvalidInput(format!("frame {k} outside scenario of {} frames", cfg.frames)));
    }
    let mut z = clutter_rows(cfg, cfg.seed, k);
    let g = &cfg.radar;
    for (m, t) in cfg.targets.iter().enumerate() {
        let Some(p) = truth.positions[k][m] else { continue };
        let mut rate = target_rate(t, &p, k, cfg);
        if t.fading {
            let mut rng = stream_rng(cfg.seed, k, STREAM_TARGET + m as u64);
            let fade: f64 = rng.sample(Exp1);
            rate *= fade;
        }
        let mass = target_spread(&p, cfg);
        for (a, i) in mass.rows.clone().enumerate() {
            for (b, &j) in mass.cols.iter().enumerate() {
                let land = {
                    let (x, y) = g.cell_center(i, j).to_cartesian();
                    cfg.land.iter().any(|l| point_in_polygon(x, y, &l.polygon))
                };
                if !land {
                    z[(i, j)] += rate * mass.mass_r[a] * mass.mass_a[b];
                }
            }
        }
    }
    RadarFrame::new(z, *g, k)
}

/// Target-free frame drawn from an independent stream, for detector
/// calibration.
pub fn render_clutter_frame(cfg: &ScenarioConfig, index: usize) -> Result<RadarFrame> {
    RadarFrame::new(clutter_rows(cfg, cfg.seed ^ CALIBRATION_KEY, index), cfg.radar, index)
}

/// Writes `frames/`, `calibration/`, `truth.csv` and `scenario.toml` under `out`.
pub fn write_scenario(cfg: &ScenarioConfig, out: &Path) -> Result<ScenarioTruth> {
    let truth = generate_scenario(cfg)?;
    let frames_dir = out.join("frames");
    let cal_dir = out.join("calibration");
    std::fs::create_dir_all(&frames_dir)?;
    std::fs::create_dir_all(&cal_dir)?;
    (0..cfg.frames).into_par_iter().try_for_each(|k| -> Result<()> {
        let f = render_frame(&truth, k, cfg)?;
        write_frame(&frame_stem(&frames_dir, k), &f)
    })?;
    (0..cfg.calibration_frames).into_par_iter().try_for_each(|k| -> Result<()> {
        let f = render_clutter_frame(cfg, k)?;
        write_frame(&frame_stem(&cal_dir, k), &f)
    })?;
    write_truth_csv(&out.join("truth.csv"), &truth.tracks)?;
    std::fs::write(out.join("scenario.toml"), cfg.to_toml()?)?;
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(targets: Vec<TargetSpec>, clutter: f64) -> ScenarioConfig {
        ScenarioConfig {
            seed: 3,
            frames: 10,
            dt: 2.5,
            radar: FrameGeometry {
                n_range: 64,
                n_azimuth: 64,
                range_res: 15.0,
                azimuth_res: 0.25f64.to_radians(),
                range_offset: 2000.0,
                azimuth_offset: 0.0,
            },
            point_spread: MeasurementModel::default(),
            clutter: ClutterSpec { mean: clutter, r0: None, k_shape: None },
            targets,
            land: vec![],
            calibration_frames: 2,
        }
    }

    fn target(waypoints: Vec<[f64; 2]>, speed: f64) -> TargetSpec {
        TargetSpec {
            id: 1,
            birth: 0,
            death: None,
            waypoints,
            speed,
            snr_db: None,
            snr_end_db: None,
            rate: Some(50.0),
            fading: false,
        }
    }

    fn polar(r: f64, a_deg: f64) -> [f64; 2] {
        let a = a_deg.to_radians();
        [r * a.cos(), r * a.sin()]
    }

    #[test]
    fn stationary_target_is_constant() {
        let cfg = base(vec![target(vec![polar(2500.0, 8.0)], 0.0)], 1.0);
        let truth = generate_scenario(&cfg).unwrap();
        let s = &truth.tracks[0].samples;
        assert_eq!(s.len(), 10);
        assert!(s.iter().all(|x| x.1 == s[0].1 && x.2 == s[0].2));
    }

    #[test]
    fn eastbound_spacing() {
        let start = polar(2400.0, 8.0);
        let cfg = base(vec![target(vec![start, [start[0] + 1000.0, start[1]]], 5.0)], 1.0);
        let truth = generate_scenario(&cfg).unwrap();
        for w in truth.tracks[0].samples.windows(2) {
            assert!(((w[1].1 - w[0].1) - 12.5).abs() < 1e-9);
            assert_eq!(w[1].2, w[0].2);
        }
    }

    #[test]
    fn leaving_fov_is_config_error() {
        let start = polar(2900.0, 8.0);
        let cfg = base(vec![target(vec![start, [start[0] + 1000.0, start[1]]], 50.0)], 1.0);
        assert!(matches!(generate_scenario(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn mass_conservation_without_clutter() {
        let cfg = base(vec![target(vec![polar(2450.0, 8.0)], 0.0)], 0.0);
        let truth = generate_scenario(&cfg).unwrap();
        let f = render_frame(&truth, 0, &cfg).unwrap();
        assert!((f.total() - 50.0).abs() <= 1e-6 * 50.0);
    }

    #[test]
    fn straddling_cells_equal() {
        let cfg0 = base(vec![], 0.0);
        let g = cfg0.radar;
        let r = g.range_center(30);
        let a = g.azimuth_edge(32);
        let cfg = base(vec![target(vec![polar(r, a.to_degrees())], 0.0)], 0.0);
        let truth = generate_scenario(&cfg).unwrap();
        let f = render_frame(&truth, 0, &cfg).unwrap();
        let (l, rr) = (f.intensities[(30, 31)], f.intensities[(30, 32)]);
        assert!((l - rr).abs() <= 1e-9 * l, "{l} vs {rr}");
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = base(vec![TargetSpec { fading: true, ..target(vec![polar(2450.0, 8.0)], 0.0) }], 1.0);
        let truth = generate_scenario(&cfg).unwrap();
        let a = render_frame(&truth, 4, &cfg).unwrap();
        let b = render_frame(&truth, 4, &cfg).unwrap();
        assert_eq!(a, b);
        let c = render_frame(&truth, 5, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn land_overwrites_cells() {
        let mut cfg = base(vec![], 1.0);
        cfg.land.push(LandRegion { polygon: vec![[0.0, 0.0], [5000.0, 0.0], [5000.0, 5000.0]], level: 1000.0, noise: 0.0 });
        let truth = generate_scenario(&cfg).unwrap();
        let f = render_frame(&truth, 0, &cfg).unwrap();
        // azimuths below 45 degrees lie inside the triangle
        assert_eq!(f.intensities[(10, 5)], 1000.0);
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = base(vec![target(vec![polar(2450.0, 8.0)], 0.0)], 1.0);
        let text = cfg.to_toml().unwrap();
        assert_eq!(ScenarioConfig::from_toml(&text).unwrap(), cfg);
    }
}
