//! End-to-end driver: masking, detection at two thresholds, point tracking,
//! track-before-detect with cross-fed birth suppression, fusion and reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detect::{
    calibrate_scale, dbscan_cluster, extract_point_detections, sgbd_score, threshold_detect, Cluster, DbscanConfig,
    ScoreMap, SgbdConfig,
};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusedEstimate, ProximityWarning, Source, TBD_LABEL_BASE};
use crate::geometry::{MeasurementModel, MotionModel};
use crate::metrics::{gospa, read_truth_csv, truth_at, write_metrics_csv, GroundTruthTrack, MetricsRow};
use crate::pmbm::{pmbm_estimate, pmbm_predict, pmbm_prune, pmbm_update, PmbmConfig, PmbmPosterior, TrackEstimate};
use crate::preprocess::container::{frame_stem, list_frames, read_frame, read_mask, write_scores};
use crate::preprocess::{apply_mask, FrameGeometry, LandMask, RadarFrame};
use crate::simulator::{generate_scenario, render_clutter_frame, render_frame, ScenarioConfig};
use crate::tbd::{adaptive_birth, em_update, tbd_manage, tbd_predict, ClutterModel, TbdComponent, TbdConfig, TbdEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropWindow {
    /// Half-open range-cell interval.
    pub range: [usize; 2],
    /// Half-open azimuth-cell interval.
    pub azimuth: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Directory of frame containers.
    pub frames: Option<PathBuf>,
    /// Scenario file rendered on the fly.
    pub scenario: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    /// Directory of clutter-only frames for score calibration.
    pub calibration: Option<PathBuf>,
    pub output: PathBuf,
    pub crop: Option<CropWindow>,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub timing: bool,
    pub emit_scoremaps: bool,
    /// Overrides the scenario seed.
    pub seed: Option<u64>,
    pub enable_pmbm: bool,
    pub enable_tbd: bool,
    pub tau_low: f64,
    pub tau_high: f64,
    pub dt: f64,
    pub q: f64,
    pub measurement: MeasurementModel,
    pub sgbd: SgbdConfig,
    /// Fixed score normalisation; calibrated when absent.
    pub score_scale: Option<f64>,
    pub calibration_quantile: f64,
    /// Input frames used for calibration when no clutter-only set exists.
    pub fallback_calibration_frames: usize,
    pub dbscan: DbscanConfig,
    pub pmbm: PmbmConfig,
    pub tbd: TbdConfig,
    pub gospa_c: f64,
    pub gospa_p: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            frames: None,
            scenario: None,
            mask: None,
            truth: None,
            calibration: None,
            output: PathBuf::from("out"),
            crop: None,
            threads: 0,
            timing: false,
            emit_scoremaps: false,
            seed: None,
            enable_pmbm: true,
            enable_tbd: true,
            tau_low: 0.12,
            tau_high: 0.9,
            dt: 2.5,
            q: 0.01,
            measurement: MeasurementModel::default(),
            sgbd: SgbdConfig::default(),
            score_scale: None,
            calibration_quantile: 0.9999,
            fallback_calibration_frames: 8,
            dbscan: DbscanConfig::default(),
            pmbm: PmbmConfig::default(),
            tbd: TbdConfig::default(),
            gospa_c: 350.0,
            gospa_p: 2.0,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    /// Every configuration problem, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.frames.is_some() == self.scenario.is_some() {
            out.push("exactly one of `frames` and `scenario` must be set".to_string());
        }
        out.extend(self.tracking_problems());
        out
    }

    /// Problems with the tracker settings alone, ignoring input and output.
    pub fn tracking_problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.tau_low) || !(0.0..=1.0).contains(&self.tau_high) {
            out.push("thresholds must lie in [0, 1]".to_string());
        }
        if self.tau_low > self.tau_high {
            out.push(format!("tau_low {} exceeds tau_high {}", self.tau_low, self.tau_high));
        }
        if !self.enable_pmbm && !self.enable_tbd {
            out.push("both trackers are disabled".to_string());
        }
        if self.score_scale.is_some_and(|s| !(s > 0.0)) {
            out.push("score_scale must be positive".to_string());
        }
        if !(self.calibration_quantile > 0.0 && self.calibration_quantile <= 1.0) {
            out.push("calibration_quantile must be in (0, 1]".to_string());
        }
        if !(self.gospa_c > 0.0 && self.gospa_p >= 1.0) {
            out.push("GOSPA needs c > 0 and p >= 1".to_string());
        }
        if let Some(c) = &self.crop {
            if c.range[0] >= c.range[1] || c.azimuth[0] >= c.azimuth[1] {
                out.push("crop window is empty".to_string());
            }
        }
        for (name, r) in [
            ("motion", MotionModel::new(self.dt, self.q, self.pmbm.p_s).map(|_| ())),
            ("measurement", MeasurementModel::new(self.measurement.sigma_r, self.measurement.sigma_theta).map(|_| ())),
            ("pmbm", self.pmbm.validate()),
            ("tbd", self.tbd.validate()),
        ] {
            if let Err(e) = r {
                out.push(format!("{name}: {e}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// Wall time per stage for one frame, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub k: usize,
    pub load: f64,
    pub mask: f64,
    pub score: f64,
    pub detect_high: f64,
    pub pmbm: f64,
    pub detect_low: f64,
    pub tbd: f64,
    pub fusion: f64,
    pub total: f64,
}

impl StageTiming {
    pub fn stage_sum(&self) -> f64 {
        self.load + self.mask + self.score + self.detect_high + self.pmbm + self.detect_low + self.tbd + self.fusion
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub k: usize,
    pub estimates: Vec<FusedEstimate>,
    pub pmbm: Vec<TrackEstimate>,
    pub tbd: Vec<TbdEstimate>,
    pub warnings: Vec<ProximityWarning>,
    pub high_clusters: usize,
    pub low_clusters: usize,
    pub tbd_components: usize,
    pub timing: StageTiming,
    pub scores: Option<(ScoreMap, FrameGeometry)>,
}

/// Both trackers and their state across frames.
pub struct Tracker {
    cfg: PipelineConfig,
    motion: MotionModel,
    sgbd: SgbdConfig,
    mask: Option<LandMask>,
    pmbm: PmbmPosterior,
    tbd: Vec<TbdComponent>,
    next_tbd_label: u64,
}

fn clock<T>(slot: &mut f64, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    *slot += t.elapsed().as_secs_f64();
    out
}

impl Tracker {
    pub fn new(cfg: &PipelineConfig, score_scale: f64, mask: Option<LandMask>) -> Result<Self> {
        let problems = cfg.tracking_problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        if !(score_scale > 0.0) {
            return Err(Error::Config("score scale must be positive".into()));
        }
        Ok(Self {
            cfg: cfg.clone(),
            motion: MotionModel::new(cfg.dt, cfg.q, cfg.pmbm.p_s)?,
            sgbd: SgbdConfig { scale: score_scale, ..cfg.sgbd },
            mask,
            pmbm: PmbmPosterior::new(),
            tbd: Vec::new(),
            next_tbd_label: 0,
        })
    }

    pub fn tbd_components(&self) -> &[TbdComponent] {
        &self.tbd
    }

    pub fn pmbm_posterior(&self) -> &PmbmPosterior {
        &self.pmbm
    }

    fn detect(&self, scores: &ScoreMap, frame: &RadarFrame, tau: f64) -> Result<Vec<Cluster>> {
        let det = threshold_detect(scores, tau)?;
        dbscan_cluster(&det, scores, frame, &self.cfg.dbscan)
    }

    pub fn process(&mut self, frame: &RadarFrame) -> Result<FrameReport> {
        let start = Instant::now();
        let k = frame.timestamp_index;
        let mut t = StageTiming { k, ..Default::default() };
        let cfg = self.cfg.clone();
        let mm = cfg.measurement;

        let masked = clock(&mut t.mask, || match &self.mask {
            Some(m) => apply_mask(frame, m),
            None => Ok(frame.clone()),
        })?;
        let scores = clock(&mut t.score, || sgbd_score(&masked, &self.sgbd))?;

        let mut pmbm_est = Vec::new();
        let mut high_clusters = 0;
        if cfg.enable_pmbm {
            let clusters = clock(&mut t.detect_high, || self.detect(&scores, &masked, cfg.tau_high))?;
            high_clusters = clusters.len();
            let z = extract_point_detections(&clusters);
            let fov = masked.geometry.field_of_view();
            pmbm_est = clock(&mut t.pmbm, || -> Result<_> {
                let predicted = pmbm_predict(&self.pmbm, &self.motion, &fov, &cfg.pmbm)?;
                let updated = pmbm_update(&predicted, &z, &mm, &cfg.pmbm)?;
                self.pmbm = pmbm_prune(&updated, &cfg.pmbm)?;
                Ok(pmbm_estimate(&self.pmbm, &cfg.pmbm))
            })?;
        }
        let pmbm_positions: Vec<(f64, f64)> = pmbm_est.iter().map(|e| e.state.position()).collect();

        let mut tbd_est = Vec::new();
        let mut low_clusters = 0;
        if cfg.enable_tbd {
            let clusters = clock(&mut t.detect_low, || self.detect(&scores, &masked, cfg.tau_low))?;
            low_clusters = clusters.len();
            tbd_est = clock(&mut t.tbd, || -> Result<_> {
                let born = adaptive_birth(
                    &clusters,
                    &pmbm_positions,
                    &self.tbd,
                    &masked.geometry,
                    &mm,
                    &cfg.tbd,
                    &mut self.next_tbd_label,
                    k,
                )?;
                let mut comps = tbd_predict(&self.tbd, &self.motion, &cfg.tbd)?;
                comps.extend(born);
                let mut clutter = ClutterModel::from_profile(&masked, self.mask.as_ref(), &cfg.tbd.clutter_profile)?;
                let (updated, _) = em_update(&comps, &masked, &mut clutter, &mm, &cfg.tbd)?;
                let (est, survivors) = tbd_manage(&updated, &pmbm_positions, &cfg.tbd);
                self.tbd = survivors;
                Ok(est)
            })?;
        }

        let (estimates, warnings) = clock(&mut t.fusion, || fuse(&pmbm_est, &tbd_est, k, cfg.tbd.epsilon));
        t.total = start.elapsed().as_secs_f64();
        Ok(FrameReport {
            k,
            estimates,
            pmbm: pmbm_est,
            tbd: tbd_est,
            warnings,
            high_clusters,
            low_clusters,
            tbd_components: self.tbd.len(),
            timing: t,
            scores: cfg.emit_scoremaps.then_some((scores, masked.geometry)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub reports: Vec<FrameReport>,
    pub metrics: Vec<MetricsRow>,
    pub score_scale: f64,
}

impl RunResult {
    /// Time-averaged `[total, loc_sq, missed_sq, false_sq, n_truth, n_est]`.
    pub fn mean_metrics(&self) -> [f64; 6] {
        crate::metrics::average(&self.metrics)
    }
}

fn crop_frame(frame: RadarFrame, crop: &Option<CropWindow>) -> Result<RadarFrame> {
    match crop {
        Some(c) => frame.crop(c.range[0]..c.range[1], c.azimuth[0]..c.azimuth[1]),
        None => Ok(frame),
    }
}

fn crop_mask(mask: LandMask, frame_shape: (usize, usize), crop: &Option<CropWindow>) -> Result<LandMask> {
    match crop {
        Some(c) if mask.shape() != frame_shape => {
            if c.range[1] > mask.shape().0 || c.azimuth[1] > mask.shape().1 {
                return Err(Error::ShapeMismatch { expected: frame_shape, actual: mask.shape() });
            }
            Ok(LandMask {
                mask: mask.mask.slice(ndarray::s![c.range[0]..c.range[1], c.azimuth[0]..c.azimuth[1]]).to_owned(),
                ..mask
            })
        }
        _ => Ok(mask),
    }
}

/// GOSPA of every report against the truth tracks at `k * dt`.
pub fn score_reports(reports: &[FrameReport], truth: &[GroundTruthTrack], cfg: &PipelineConfig) -> Result<Vec<MetricsRow>> {
    reports
        .iter()
        .map(|r| {
            let x = truth_at(truth, r.k as f64 * cfg.dt);
            let y: Vec<(f64, f64)> = r.estimates.iter().map(|e| e.state.position()).collect();
            Ok(MetricsRow { k: r.k, result: gospa(&x, &y, cfg.gospa_c, cfg.gospa_p)?, n_truth: x.len(), n_est: y.len() })
        })
        .collect()
}

#[derive(Deserialize)]
struct TrackPosition {
    k: usize,
    px: f64,
    py: f64,
}

/// Estimated positions per frame index from a tracks file.
pub fn read_track_positions(path: &Path) -> Result<BTreeMap<usize, Vec<(f64, f64)>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for rec in r.deserialize() {
        let rec: TrackPosition = rec?;
        out.entry(rec.k).or_default().push((rec.px, rec.py));
    }
    Ok(out)
}

/// GOSPA of stored positions for frames `0..frames` against the truth.
pub fn score_positions(
    positions: &BTreeMap<usize, Vec<(f64, f64)>>,
    frames: usize,
    truth: &[GroundTruthTrack],
    dt: f64,
    c: f64,
    p: f64,
) -> Result<Vec<MetricsRow>> {
    (0..frames)
        .map(|k| {
            let x = truth_at(truth, k as f64 * dt);
            let y = positions.get(&k).map(Vec::as_slice).unwrap_or(&[]);
            Ok(MetricsRow { k, result: gospa(&x, y, c, p)?, n_truth: x.len(), n_est: y.len() })
        })
        .collect()
}

/// Runs both trackers over an in-memory frame sequence.
pub fn run_frames<I>(cfg: &PipelineConfig, frames: I, score_scale: f64, mask: Option<LandMask>, truth: Option<&[GroundTruthTrack]>) -> Result<RunResult>
where
    I: IntoIterator<Item = Result<RadarFrame>>,
{
    let mut tracker = Tracker::new(cfg, score_scale, mask)?;
    let mut reports = Vec::new();
    let mut load_start = Instant::now();
    for (index, frame) in frames.into_iter().enumerate() {
        let frame = frame
            .and_then(|f| crop_frame(f, &cfg.crop))
            .map_err(|e| Error::Frame { index, message: e.to_string() })?;
        let load = load_start.elapsed().as_secs_f64();
        let mut report = tracker.process(&frame).map_err(|e| Error::Frame { index, message: e.to_string() })?;
        report.timing.load = load;
        report.timing.total += load;
        reports.push(report);
        load_start = Instant::now();
    }
    let metrics = match truth {
        Some(t) => score_reports(&reports, t, cfg)?,
        None => Vec::new(),
    };
    Ok(RunResult { reports, metrics, score_scale })
}

fn calibrate(cfg: &PipelineConfig, frames: &[RadarFrame], mask: Option<&LandMask>) -> Result<f64> {
    let masked: Vec<RadarFrame> = frames
        .iter()
        .map(|f| match mask {
            Some(m) => apply_mask(f, m),
            None => Ok(f.clone()),
        })
        .collect::<Result<_>>()?;
    calibrate_scale(&masked, cfg.sgbd.sigma_s, cfg.calibration_quantile)
}

#[derive(Serialize)]
struct TrackRow {
    k: usize,
    label: u64,
    px: f64,
    py: f64,
    vx: f64,
    vy: f64,
    r: f64,
    lambda_hat: Option<f64>,
    source: &'static str,
}

#[derive(Serialize)]
struct Manifest<'a> {
    hybridtrack_version: &'static str,
    frames_processed: usize,
    resolved_score_scale: f64,
    config: &'a PipelineConfig,
}

pub fn write_tracks_csv(path: &Path, reports: &[FrameReport]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["k", "label", "px", "py", "vx", "vy", "r", "lambda_hat", "source"])?;
    for rep in reports {
        let lambdas: BTreeMap<u64, f64> = rep.tbd.iter().map(|e| (e.label + TBD_LABEL_BASE, e.lambda_hat)).collect();
        for e in &rep.estimates {
            w.serialize(TrackRow {
                k: e.k,
                label: e.label,
                px: e.state.px,
                py: e.state.py,
                vx: e.state.vx,
                vy: e.state.vy,
                r: e.existence,
                lambda_hat: if e.source == Source::Tbd { lambdas.get(&e.label).copied() } else { None },
                source: e.source.as_str(),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_timing_csv(path: &Path, reports: &[FrameReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(r.timing)?;
    }
    w.flush()?;
    Ok(())
}

fn write_warnings_csv(path: &Path, reports: &[FrameReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["k", "pmbm_label", "tbd_label", "distance"])?;
    for wr in reports.iter().flat_map(|r| &r.warnings) {
        w.write_record([wr.k.to_string(), wr.pmbm_label.to_string(), wr.tbd_label.to_string(), wr.distance.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn sibling_calibration(frames_dir: &Path) -> Option<PathBuf> {
    let dir = frames_dir.parent()?.join("calibration");
    dir.is_dir().then_some(dir)
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

/// Runs the configured input through both trackers and writes
/// `tracks.csv`, `warnings.csv`, `manifest.toml`, and when requested
/// `metrics.csv`, `timing.csv` and `scoremaps/` under the output directory.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunResult> {
    cfg.validate()?;
    in_pool(cfg.threads, || run_pipeline_inner(cfg))
}

fn run_pipeline_inner(cfg: &PipelineConfig) -> Result<RunResult> {
    let mask = match &cfg.mask {
        Some(p) => Some(read_mask(p)?.0),
        None => None,
    };
    let result = if let Some(path) = &cfg.scenario {
        let mut sc = ScenarioConfig::load(path)?;
        if let Some(seed) = cfg.seed {
            sc.seed = seed;
        }
        let truth = generate_scenario(&sc)?;
        let shape = match &cfg.crop {
            Some(c) => (c.range[1] - c.range[0], c.azimuth[1] - c.azimuth[0]),
            None => sc.radar.shape(),
        };
        let mask = mask.map(|m| crop_mask(m, shape, &cfg.crop)).transpose()?;
        let scale = match cfg.score_scale {
            Some(s) => s,
            None => {
                let n = sc.calibration_frames.max(1);
                let cal = (0..n)
                    .map(|i| render_clutter_frame(&sc, i).and_then(|f| crop_frame(f, &cfg.crop)))
                    .collect::<Result<Vec<_>>>()?;
                calibrate(cfg, &cal, mask.as_ref())?
            }
        };
        let frames = (0..sc.frames).map(|k| render_frame(&truth, k, &sc));
        let truth_tracks = match &cfg.truth {
            Some(p) => read_truth_csv(p)?,
            None => truth.tracks.clone(),
        };
        run_frames(cfg, frames, scale, mask, Some(&truth_tracks))?
    } else {
        let dir = cfg.frames.as_ref().expect("validated input");
        let stems = list_frames(dir)?;
        let load = |(index, s): (usize, &PathBuf)| {
            read_frame(s).map_err(|e| Error::Frame { index, message: e.to_string() })
        };
        let first = match stems.first() {
            Some(s) => Some(crop_frame(load((0, s))?, &cfg.crop)?),
            None => None,
        };
        let shape = first.as_ref().map(|f| f.shape()).unwrap_or((0, 0));
        let mask = mask.map(|m| crop_mask(m, shape, &cfg.crop)).transpose()?;
        let scale = match cfg.score_scale {
            Some(s) => s,
            None => {
                let cal_dir = cfg.calibration.clone().or_else(|| sibling_calibration(dir));
                let cal = match cal_dir {
                    Some(d) => list_frames(&d)?.iter().map(|s| read_frame(s).and_then(|f| crop_frame(f, &cfg.crop))).collect::<Result<Vec<_>>>()?,
                    None => stems
                        .iter()
                        .take(cfg.fallback_calibration_frames.max(1))
                        .enumerate()
                        .map(|p| load(p).and_then(|f| crop_frame(f, &cfg.crop)))
                        .collect::<Result<Vec<_>>>()?,
                };
                if cal.is_empty() {
                    1.0
                } else {
                    calibrate(cfg, &cal, mask.as_ref())?
                }
            }
        };
        let truth = match &cfg.truth {
            Some(p) => Some(read_truth_csv(p)?),
            None => None,
        };
        run_frames(cfg, stems.iter().enumerate().map(load), scale, mask, truth.as_deref())?
    };
    write_outputs(cfg, &result)?;
    Ok(result)
}

pub fn write_outputs(cfg: &PipelineConfig, result: &RunResult) -> Result<()> {
    let out = &cfg.output;
    std::fs::create_dir_all(out)?;
    write_tracks_csv(&out.join("tracks.csv"), &result.reports)?;
    write_warnings_csv(&out.join("warnings.csv"), &result.reports)?;
    if !result.metrics.is_empty() {
        write_metrics_csv(&out.join("metrics.csv"), &result.metrics)?;
    }
    if cfg.timing {
        write_timing_csv(&out.join("timing.csv"), &result.reports)?;
    }
    if cfg.emit_scoremaps {
        let dir = out.join("scoremaps");
        std::fs::create_dir_all(&dir)?;
        for r in &result.reports {
            if let Some((s, g)) = &r.scores {
                write_scores(&frame_stem(&dir, r.k), &s.scores, g, r.k)?;
            }
        }
    }
    let manifest = Manifest {
        hybridtrack_version: env!("CARGO_PKG_VERSION"),
        frames_processed: result.reports.len(),
        resolved_score_scale: result.score_scale,
        config: cfg,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Toml(e.to_string()))?;
    let mut f = std::fs::File::create(out.join("manifest.toml"))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
