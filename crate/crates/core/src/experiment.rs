//! Benchmark runs: many simulated tracks per parameter point, every variant
//! on the same tracks, aggregated per step.
//!
//! Output files (all written by [`ExperimentResult::write`]):
//!
//! | file | columns |
//! |------|---------|
//! | `omat.csv` | `sigma_s2,alpha,gamma,variant,step,omat` (mean over tracks) |
//! | `track_omat.csv` | `sigma_s2,alpha,gamma,variant,track,step,omat` |
//! | `timing.csv` | `sigma_s2,alpha,gamma,variant,step,seconds` (mean over tracks) |
//! | `summary.json` | the spec plus per point and variant averages |
//!
//! The two OMAT files are byte-identical across reruns with the same spec;
//! timing lives in its own files because wall time never is.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{init_belief, FilterConfig, InitMode, TtFilter, Variant};
use crate::metrics::{bpf_track, BpfConfig, TrackRecord};
use crate::model::{simulate, NoiseVariance, Scenario, ScenarioConfig, Trajectory};
use crate::nll::FilterNoiseModel;
use crate::rng::{self, Stream};

/// How sweep axes combine into parameter points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    /// The baseline point, then each axis varied alone.
    OneAtATime,
    /// Full Cartesian product.
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub sigma_s2: Vec<f64>,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub mode: SweepMode,
}

impl Default for SweepAxes {
    fn default() -> Self {
        Self {
            sigma_s2: vec![0.0001, 0.001, 0.01, 0.1, 1.0],
            alpha: vec![1.0 / 3.0, 1.0, 3.0],
            gamma: vec![0.025, 0.05, 0.075, 0.1],
            mode: SweepMode::OneAtATime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sigma_s2: f64,
    pub alpha: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scenario: ScenarioConfig,
    /// Settings shared by every TT variant; variants only toggle the flags.
    pub filter: FilterConfig,
    pub bpf: BpfConfig,
    pub variants: Vec<Variant>,
    pub sweep: SweepAxes,
    pub tracks: usize,
    pub steps: usize,
    pub seed: u64,
    /// Worker threads; `None` uses every core.
    pub jobs: Option<usize>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            filter: FilterConfig::default(),
            bpf: BpfConfig::default(),
            variants: vec![Variant::TtNonlinear, Variant::TtLinear, Variant::Bpf],
            sweep: SweepAxes::default(),
            tracks: 50,
            steps: 40,
            seed: 0,
            jobs: None,
        }
    }
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid experiment config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::config("at least one variant is required"));
        }
        if self.tracks == 0 || self.steps == 0 {
            return Err(Error::config("tracks and steps must be positive"));
        }
        if self.jobs == Some(0) {
            return Err(Error::config("jobs must be positive"));
        }
        let axes = &self.sweep;
        if axes.sigma_s2.is_empty() || axes.alpha.is_empty() || axes.gamma.is_empty() {
            return Err(Error::config("sweep axes must not be empty"));
        }
        self.bpf.validate()?;
        self.scenario.build()?;
        Ok(())
    }

    /// The configured scenario's own values, used as the sweep baseline.
    pub fn baseline(&self) -> Result<SweepPoint> {
        let sigma_s2 = match &self.scenario.sigma_s2 {
            NoiseVariance::Shared(v) => *v,
            NoiseVariance::PerSensor(_) => {
                return Err(Error::config("sweeps need a shared measurement variance"));
            }
        };
        Ok(SweepPoint {
            sigma_s2,
            alpha: self.filter.alpha,
            gamma: self.scenario.gamma,
        })
    }

    pub fn points(&self) -> Result<Vec<SweepPoint>> {
        let base = self.baseline()?;
        let axes = &self.sweep;
        let mut points = Vec::new();
        match axes.mode {
            SweepMode::Grid => {
                for &sigma_s2 in &axes.sigma_s2 {
                    for &alpha in &axes.alpha {
                        for &gamma in &axes.gamma {
                            points.push(SweepPoint { sigma_s2, alpha, gamma });
                        }
                    }
                }
            }
            SweepMode::OneAtATime => {
                points.push(base);
                let mut add = |p: SweepPoint| {
                    if !points.contains(&p) {
                        points.push(p);
                    }
                };
                axes.sigma_s2.iter().for_each(|&v| add(SweepPoint { sigma_s2: v, ..base }));
                axes.alpha.iter().for_each(|&v| add(SweepPoint { alpha: v, ..base }));
                axes.gamma.iter().for_each(|&v| add(SweepPoint { gamma: v, ..base }));
            }
        }
        Ok(points)
    }

    /// A spec that runs only its baseline point.
    pub fn single_point(mut self) -> Result<Self> {
        let base = self.baseline()?;
        self.sweep = SweepAxes {
            sigma_s2: vec![base.sigma_s2],
            alpha: vec![base.alpha],
            gamma: vec![base.gamma],
            mode: SweepMode::Grid,
        };
        Ok(self)
    }

    fn scenario_at(&self, p: &SweepPoint) -> Result<Scenario> {
        ScenarioConfig {
            sigma_s2: NoiseVariance::Shared(p.sigma_s2),
            gamma: p.gamma,
            ..self.scenario.clone()
        }
        .build()
    }

    fn filter_at(&self, p: &SweepPoint) -> FilterConfig {
        FilterConfig {
            alpha: p.alpha,
            ..self.filter.clone()
        }
    }
}

/// Records of one track for every variant, in spec order.
#[derive(Debug, Clone)]
pub struct TrackRun {
    pub track: usize,
    pub seed: u64,
    pub trajectory: Trajectory,
    pub records: Vec<TrackRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackFailure {
    pub track: usize,
    pub message: String,
}

/// Runs every variant on one simulated track.
pub fn run_track(
    scenario: &Scenario,
    filter: &FilterConfig,
    bpf: &BpfConfig,
    variants: &[Variant],
    steps: usize,
    seed: u64,
    track: usize,
) -> Result<TrackRun> {
    let track_seed = rng::track_seed(seed, track as u64);
    let trajectory = simulate(scenario, steps, track_seed)?;
    let mut records = Vec::with_capacity(variants.len());
    for &variant in variants {
        let record = match variant.configure(filter) {
            Some(cfg) => TtFilter::new(scenario, cfg)?.track(&trajectory, track_seed)?.record,
            None => {
                // Same initial belief the baseline TT filter gets on this track.
                let tt = TtFilter::new(scenario, filter.clone())?;
                let mut init_rng = rng::stream(track_seed, Stream::Init);
                let init = init_belief(InitMode::AroundTruth, &trajectory.initial, tt.grid(), filter, &mut init_rng)?;
                let noise = FilterNoiseModel::with_alpha(filter.alpha)?;
                bpf_track(&trajectory, tt.grid(), tt.measurement(), &noise, &init, bpf, track_seed)?
            }
        };
        records.push(record);
    }
    Ok(TrackRun {
        track,
        seed: track_seed,
        trajectory,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub label: String,
    /// Mean OMAT at each step over successful tracks.
    pub step_omat: Vec<f64>,
    pub step_seconds: Vec<f64>,
    pub mean_omat: f64,
    pub mean_step_seconds: f64,
    pub tracks: usize,
    pub failed_steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PointResult {
    pub point: SweepPoint,
    pub variants: Vec<VariantSummary>,
    pub track_failures: Vec<TrackFailure>,
    #[serde(skip)]
    pub runs: Vec<TrackRun>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub points: Vec<PointResult>,
}

fn mean_by_step(rows: &[&[f64]], steps: usize) -> Vec<f64> {
    (0..steps)
        .map(|t| rows.iter().map(|r| r[t]).sum::<f64>() / rows.len() as f64)
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn summarize(variants: &[Variant], runs: &[TrackRun], steps: usize) -> Vec<VariantSummary> {
    variants
        .iter()
        .enumerate()
        .map(|(k, &variant)| {
            let omat: Vec<&[f64]> = runs.iter().map(|r| r.records[k].omat.as_slice()).collect();
            let secs: Vec<&[f64]> = runs.iter().map(|r| r.records[k].step_seconds.as_slice()).collect();
            let step_omat = mean_by_step(&omat, steps);
            let step_seconds = mean_by_step(&secs, steps);
            VariantSummary {
                variant,
                label: variant.label().to_string(),
                mean_omat: mean(&step_omat),
                mean_step_seconds: mean(&step_seconds),
                step_omat,
                step_seconds,
                tracks: runs.len(),
                failed_steps: runs.iter().map(|r| r.records[k].failures.len()).sum(),
            }
        })
        .collect()
}

/// Runs the whole sweep. Tracks run in parallel; results keep track order.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = spec.jobs {
        builder = builder.num_threads(j);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;

    let mut points = Vec::new();
    for point in spec.points()? {
        let scenario = spec.scenario_at(&point)?;
        let filter = spec.filter_at(&point);
        // Configuration problems surface once, before any track runs.
        for v in &spec.variants {
            TtFilter::new(&scenario, v.configure(&filter).unwrap_or_else(|| filter.clone()))?;
        }
        log::info!("point {point:?}: {} tracks", spec.tracks);
        let outcomes: Vec<Result<TrackRun>> = pool.install(|| {
            use rayon::prelude::*;
            (0..spec.tracks)
                .into_par_iter()
                .map(|i| run_track(&scenario, &filter, &spec.bpf, &spec.variants, spec.steps, spec.seed, i))
                .collect()
        });
        let mut runs = Vec::new();
        let mut track_failures = Vec::new();
        for (track, outcome) in outcomes.into_iter().enumerate() {
            match outcome {
                Ok(run) => runs.push(run),
                Err(e) => {
                    log::warn!("track {track} failed: {e}");
                    track_failures.push(TrackFailure {
                        track,
                        message: e.to_string(),
                    });
                }
            }
        }
        points.push(PointResult {
            point,
            variants: summarize(&spec.variants, &runs, spec.steps),
            track_failures,
            runs,
        });
    }
    Ok(ExperimentResult {
        spec: spec.clone(),
        points,
    })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

impl ExperimentResult {
    pub fn write_omat_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "sigma_s2,alpha,gamma,variant,step,omat")?;
        for p in &self.points {
            let SweepPoint { sigma_s2, alpha, gamma } = p.point;
            for v in &p.variants {
                for (t, o) in v.step_omat.iter().enumerate() {
                    writeln!(w, "{sigma_s2},{alpha},{gamma},{},{},{o}", v.variant, t + 1)?;
                }
            }
        }
        Ok(())
    }

    pub fn write_track_omat_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "sigma_s2,alpha,gamma,variant,track,step,omat")?;
        for p in &self.points {
            let SweepPoint { sigma_s2, alpha, gamma } = p.point;
            for (k, variant) in self.spec.variants.iter().enumerate() {
                for run in &p.runs {
                    for (t, o) in run.records[k].omat.iter().enumerate() {
                        writeln!(w, "{sigma_s2},{alpha},{gamma},{variant},{},{},{o}", run.track, t + 1)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn write_timing_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "sigma_s2,alpha,gamma,variant,step,seconds")?;
        for p in &self.points {
            let SweepPoint { sigma_s2, alpha, gamma } = p.point;
            for v in &p.variants {
                for (t, s) in v.step_seconds.iter().enumerate() {
                    writeln!(w, "{sigma_s2},{alpha},{gamma},{},{},{s}", v.variant, t + 1)?;
                }
            }
        }
        Ok(())
    }

    /// Writes every output file into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_omat_csv(create(dir, "omat.csv")?)?;
        self.write_track_omat_csv(create(dir, "track_omat.csv")?)?;
        self.write_timing_csv(create(dir, "timing.csv")?)?;
        let mut summary = create(dir, "summary.json")?;
        serde_json::to_writer_pretty(&mut summary, self)?;
        summary.flush()?;
        Ok(())
    }
}
