use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hybridtrack::metrics::{read_truth_csv, write_metrics_csv};
use hybridtrack::pipeline::{read_track_positions, run_pipeline, score_positions, PipelineConfig, RunResult};
use hybridtrack::preprocess::container::{list_frames, read_frame, write_frame, write_mask};
use hybridtrack::preprocess::{build_land_mask, compute_background, default_land_threshold, RadarFrame};
use hybridtrack::simulator::{write_scenario, ScenarioConfig};

const DEMO_SCENARIO: &str = include_str!("../../core/scenarios/demo.toml");

#[derive(Parser)]
#[command(name = "hybridtrack", version, about = "Hybrid point-tracker and track-before-detect radar tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scenario to frame containers and a truth file.
    Simulate {
        /// Scenario file.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate the static background of a frame set and derive a land mask.
    Mask {
        /// Directory of frame containers.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Land threshold on the background; estimated when absent.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = 2)]
        dil_r: usize,
        #[arg(long, default_value_t = 2)]
        dil_a: usize,
    },
    /// Run both trackers over frames or a scenario.
    Track {
        /// Pipeline configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of frame containers.
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Scenario file rendered on the fly.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Land mask container stem.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Score a tracks file against a truth file.
    Score {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Frame count; derived from both files when absent.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 2.5)]
        dt: f64,
        #[arg(long, default_value_t = 350.0)]
        c: f64,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
    },
    /// Run the bundled two-strong, one-weak target scenario end to end.
    Demo {
        #[command(flatten)]
        run: RunFlags,
    },
}

#[derive(Args)]
struct RunFlags {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    no_tbd: bool,
    #[arg(long)]
    no_pmbm: bool,
    #[arg(long)]
    tau_low: Option<f64>,
    #[arg(long)]
    tau_high: Option<f64>,
    #[arg(long)]
    emit_scoremaps: bool,
    /// Write per-stage wall times to timing.csv.
    #[arg(long)]
    timing: bool,
}

impl RunFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(out) = &self.out {
            cfg.output = out.clone();
        }
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if self.no_tbd {
            cfg.enable_tbd = false;
        }
        if self.no_pmbm {
            cfg.enable_pmbm = false;
        }
        if let Some(t) = self.tau_low {
            cfg.tau_low = t;
        }
        if let Some(t) = self.tau_high {
            cfg.tau_high = t;
        }
        cfg.emit_scoremaps |= self.emit_scoremaps;
        cfg.timing |= self.timing;
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn track(cfg: &PipelineConfig) -> Result<()> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        bail!("invalid configuration:\n  {}", problems.join("\n  "));
    }
    let result = run_pipeline(cfg)?;
    summarize(cfg, &result);
    Ok(())
}

fn summarize(cfg: &PipelineConfig, result: &RunResult) {
    let labels: std::collections::BTreeSet<u64> =
        result.reports.iter().flat_map(|r| r.estimates.iter().map(|e| e.label)).collect();
    println!("frames processed: {}", result.reports.len());
    println!("distinct track labels: {}", labels.len());
    if !result.metrics.is_empty() {
        println!("mean GOSPA: {:.2} m", result.mean_metrics()[0]);
    }
    println!("outputs written to {}", cfg.output.display());
}

fn simulate(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut sc = ScenarioConfig::load(config).with_context(|| format!("reading {}", config.display()))?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    let truth = write_scenario(&sc, out)?;
    println!("wrote {} frames and {} truth tracks to {}", sc.frames, truth.tracks.len(), out.display());
    Ok(())
}

fn mask(frames: &Path, out: &Path, tau: Option<f64>, dil_r: usize, dil_a: usize) -> Result<()> {
    let stems = list_frames(frames)?;
    if stems.is_empty() {
        bail!("no frames in {}", frames.display());
    }
    let loaded = stems.iter().map(|s| read_frame(s)).collect::<hybridtrack::Result<Vec<_>>>()?;
    let geometry = loaded[0].geometry;
    let background = compute_background(&loaded)?;
    let tau = tau.unwrap_or_else(|| default_land_threshold(&background));
    let land = build_land_mask(&background, tau, dil_r, dil_a, geometry.is_full_circle())?;
    std::fs::create_dir_all(out)?;
    write_frame(&out.join("background"), &RadarFrame::new(background, geometry, 0)?)?;
    write_mask(&out.join("mask"), &land, &geometry)?;
    println!("land threshold {tau:.6}, {} masked cells", land.count());
    Ok(())
}

fn score(tracks: &Path, truth: &Path, out: &Path, frames: Option<usize>, dt: f64, c: f64, p: f64) -> Result<()> {
    let positions = read_track_positions(tracks)?;
    let truth = read_truth_csv(truth)?;
    let frames = frames.unwrap_or_else(|| {
        let last_est = positions.keys().next_back().map_or(0, |k| k + 1);
        let last_truth = truth
            .iter()
            .filter_map(|t| t.interval())
            .map(|(_, t1)| (t1 / dt).floor() as usize + 1)
            .max()
            .unwrap_or(0);
        last_est.max(last_truth)
    });
    let rows = score_positions(&positions, frames, &truth, dt, c, p)?;
    std::fs::create_dir_all(out)?;
    write_metrics_csv(&out.join("metrics.csv"), &rows)?;
    let mean = hybridtrack::metrics::average(&rows);
    println!("frames scored: {frames}");
    println!("mean GOSPA: {:.2} m", mean[0]);
    Ok(())
}

fn demo(run: &RunFlags) -> Result<()> {
    let mut cfg = PipelineConfig { output: PathBuf::from("demo_out"), ..PipelineConfig::default() };
    run.apply(&mut cfg);
    std::fs::create_dir_all(&cfg.output)?;
    let scenario = cfg.output.join("scenario.toml");
    std::fs::write(&scenario, DEMO_SCENARIO)?;
    cfg.scenario = Some(scenario);
    track(&cfg)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate { config, out, seed } => simulate(&config, &out, seed),
        Command::Mask { frames, out, tau, dil_r, dil_a } => mask(&frames, &out, tau, dil_r, dil_a),
        Command::Track { config, frames, scenario, mask, truth, run } => {
            let mut cfg = load_config(config.as_deref())?;
            if frames.is_some() {
                cfg.frames = frames;
            }
            if scenario.is_some() {
                cfg.scenario = scenario;
            }
            if mask.is_some() {
                cfg.mask = mask;
            }
            if truth.is_some() {
                cfg.truth = truth;
            }
            run.apply(&mut cfg);
            track(&cfg)
        }
        Command::Score { tracks, truth, out, frames, dt, c, p } => score(&tracks, &truth, &out, frames, dt, c, p),
        Command::Demo { run } => demo(&run),
    }
}
