//! The TT filter: one time step is
//!
//! 1. propagate the belief through the motion model,
//! 2. minimize measurement + prior NLL over target positions,
//! 3. gate the estimate with a χ² test and, if it fails, run the enabled
//!    recoveries (one-by-one sensor addition, square hopping),
//! 4. repair the Hessian if it is not positive definite,
//! 5. place sigma points (with the polar correction near sensors),
//! 6. take moments and rebuild the Gaussian belief.
//!
//! A step that fails numerically does not end the track: the filter carries
//! the propagated prior forward and records the failure.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DVector, Matrix2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::consistency::{one_by_one_recovery, square_hopping_recovery, ConsistencyConfig, ConsistencyGate};
use crate::error::{Error, Result};
use crate::hessfix::repair_hessian;
use crate::metrics::{StepFailure, TrackRecord};
use crate::model::{target_position, MeasurementFrame, MeasurementModel, NoiseVariance, Scenario, SensorGrid, TargetState, Trajectory};
use crate::moments::{assemble, spatial_moments, velocity_moments, PosteriorBelief, COVARIANCE_FLOOR};
use crate::nll::{propagate_prior, CombinedObjective, FilterNoiseModel, GaussianBelief, Objective, PropagatedPrior};
use crate::optimizer::{minimize, BoxConstraints, OptimizeOptions};
use crate::quadrature::{polar_sigma_adjust, sigma_points, weigh_points, DirectionSet, PolarFrame, RadialRule};
use crate::rng::{self, Stream};

/// Named filter configurations compared in benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "tt-nonlinear")]
    TtNonlinear,
    #[serde(rename = "tt-linear")]
    TtLinear,
    #[serde(rename = "tt-no-hopping")]
    TtNoHopping,
    #[serde(rename = "tt-fixed-init")]
    TtFixedInit,
    #[serde(rename = "tt-hopping-no-1by1")]
    TtHoppingNo1by1,
    #[serde(rename = "tt-no-hopping-no-1by1")]
    TtNoHoppingNo1by1,
    #[serde(rename = "bpf")]
    Bpf,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::TtNonlinear,
        Variant::TtLinear,
        Variant::TtNoHopping,
        Variant::TtFixedInit,
        Variant::TtHoppingNo1by1,
        Variant::TtNoHoppingNo1by1,
        Variant::Bpf,
    ];

    /// Command-line and CSV name.
    pub fn name(self) -> &'static str {
        match self {
            Variant::TtNonlinear => "tt-nonlinear",
            Variant::TtLinear => "tt-linear",
            Variant::TtNoHopping => "tt-no-hopping",
            Variant::TtFixedInit => "tt-fixed-init",
            Variant::TtHoppingNo1by1 => "tt-hopping-no-1by1",
            Variant::TtNoHoppingNo1by1 => "tt-no-hopping-no-1by1",
            Variant::Bpf => "bpf",
        }
    }

    /// Human-readable label for tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::TtNonlinear => "TT nonlinear",
            Variant::TtLinear => "TT linear",
            Variant::TtNoHopping => "TT noHopping",
            Variant::TtFixedInit => "TT fixedInit",
            Variant::TtHoppingNo1by1 => "TT hopping no 1by1",
            Variant::TtNoHoppingNo1by1 => "TT no hopping no 1by1",
            Variant::Bpf => "BPF",
        }
    }

    /// Filter flags for TT variants, applied on top of `base`.
    pub fn configure(self, base: &FilterConfig) -> Option<FilterConfig> {
        let mut cfg = base.clone();
        match self {
            Variant::TtNonlinear => {}
            Variant::TtLinear => cfg.nonlinear_correction = false,
            Variant::TtNoHopping => cfg.hopping = false,
            Variant::TtFixedInit => cfg.fixed_init = true,
            Variant::TtHoppingNo1by1 => cfg.one_by_one = false,
            Variant::TtNoHoppingNo1by1 => {
                cfg.hopping = false;
                cfg.one_by_one = false;
            }
            Variant::Bpf => return None,
        }
        Some(cfg)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::config(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub nonlinear_correction: bool,
    pub hopping: bool,
    pub one_by_one: bool,
    /// Start every target near the central sensor instead of near the truth.
    pub fixed_init: bool,
    pub consistency: ConsistencyConfig,
    pub optimizer: OptimizeOptions,
    /// Polar correction applies within this fraction of the grid spacing of
    /// a sensor.
    pub near_sensor_fraction: f64,
    /// Estimates are confined to the grid extent widened by this fraction of
    /// the spacing on every side.
    pub box_margin_fraction: f64,
    /// Scale of the assumed position noise in the filter's process model.
    pub alpha: f64,
    /// Overrides the measurement variance the filter assumes.
    pub sigma_s2: Option<f64>,
    pub init_spatial_var: f64,
    pub init_velocity_var: f64,
    pub fixed_init_radius: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            nonlinear_correction: true,
            hopping: true,
            one_by_one: true,
            fixed_init: false,
            consistency: ConsistencyConfig::default(),
            optimizer: OptimizeOptions::default(),
            near_sensor_fraction: 0.2,
            box_margin_fraction: 0.0,
            alpha: FilterNoiseModel::DEFAULT_ALPHA,
            sigma_s2: None,
            init_spatial_var: 100.0,
            init_velocity_var: 0.0005,
            fixed_init_radius: 5.0,
        }
    }
}

impl FilterConfig {
    pub fn init_mode(&self) -> InitMode {
        if self.fixed_init {
            InitMode::FixedCenter
        } else {
            InitMode::AroundTruth
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Mean drawn around the true state with the initial covariance.
    AroundTruth,
    /// Means uniform in a disk around the central sensor, at rest.
    FixedCenter,
}

/// Initial belief: covariance `diag(spatial, …, velocity, …)` and a mean
/// chosen per `mode`.
pub fn init_belief<R: Rng + ?Sized>(
    mode: InitMode,
    truth: &TargetState,
    grid: &SensorGrid,
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<GaussianBelief> {
    let c = truth.count();
    for (name, v) in [("spatial", cfg.init_spatial_var), ("velocity", cfg.init_velocity_var)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::config(format!("initial {name} variance must be finite and ≥ 0, got {v}")));
        }
    }
    let mut mean = DVector::zeros(4 * c);
    match mode {
        InitMode::AroundTruth => {
            let (sx, sv) = (cfg.init_spatial_var.sqrt(), cfg.init_velocity_var.sqrt());
            for t in 0..c {
                let s = truth.target(t);
                let mut draw = |k: usize, sd: f64| s[k] + sd * rng.sample::<f64, _>(StandardNormal);
                mean[2 * t] = draw(0, sx);
                mean[2 * t + 1] = draw(1, sx);
                mean[2 * c + 2 * t] = draw(2, sv);
                mean[2 * c + 2 * t + 1] = draw(3, sv);
            }
        }
        InitMode::FixedCenter => {
            let center = grid.position(grid.central_sensor());
            for t in 0..c {
                let r = cfg.fixed_init_radius * rng.random::<f64>().sqrt();
                let theta = std::f64::consts::TAU * rng.random::<f64>();
                mean[2 * t] = center.x + r * theta.cos();
                mean[2 * t + 1] = center.y + r * theta.sin();
            }
        }
    }
    let diag = DVector::from_fn(4 * c, |i, _| {
        if i < 2 * c {
            cfg.init_spatial_var
        } else {
            cfg.init_velocity_var
        }
    });
    GaussianBelief::new(mean, nalgebra::DMatrix::from_diagonal(&diag))
}

/// Recovery work done in a step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum RecoveryAction {
    OneByOne { attempts: usize, consistent: bool },
    SquareHopping { attempts: usize, consistent: bool },
    HessianRepair { pairs: Vec<(usize, usize)> },
    Polar { target: usize, sensor: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub posterior: PosteriorBelief,
    pub belief: GaussianBelief,
    /// Estimate the sigma points were centered on.
    pub x_ml: DVector<f64>,
    /// Gate statistic of the first optimization.
    pub statistic: f64,
    /// Whether the final estimate passed the gate.
    pub consistent: bool,
    pub actions: Vec<RecoveryAction>,
    pub seconds: f64,
}

impl StepOutput {
    pub fn recovered(&self) -> bool {
        self.actions
            .iter()
            .any(|a| matches!(a, RecoveryAction::OneByOne { .. } | RecoveryAction::SquareHopping { .. }))
    }
}

#[derive(Debug, Clone)]
pub struct TrackOutput {
    pub record: TrackRecord,
    /// One entry per step; `None` where the step failed.
    pub steps: Vec<Option<StepOutput>>,
}

/// A configured TT filter for one scenario geometry.
#[derive(Debug, Clone)]
pub struct TtFilter {
    grid: SensorGrid,
    mm: MeasurementModel,
    noise: FilterNoiseModel,
    cfg: FilterConfig,
    gate: ConsistencyGate,
    rule: RadialRule,
    dirs: DirectionSet,
    bounds: BoxConstraints,
    targets: usize,
}

impl TtFilter {
    /// The hopping sizes are clamped to the scenario (the defaults assume
    /// four targets on a 5×5 grid).
    pub fn new(scenario: &Scenario, mut cfg: FilterConfig) -> Result<Self> {
        let grid = scenario.grid.clone();
        cfg.consistency.n_bad_tgt = cfg.consistency.n_bad_tgt.min(scenario.targets);
        cfg.consistency.n_bad_sq = cfg.consistency.n_bad_sq.min(grid.squares().len());
        let mm = match cfg.sigma_s2 {
            Some(v) => scenario.measurement.with_noise(NoiseVariance::Shared(v))?,
            None => scenario.measurement.clone(),
        };
        mm.check_likelihood_ready(grid.len())?;
        let targets = scenario.targets;
        cfg.consistency.validate(targets, grid.squares().len())?;
        if !(cfg.near_sensor_fraction >= 0.0) {
            return Err(Error::config("near-sensor fraction must be ≥ 0"));
        }
        if !(cfg.box_margin_fraction >= 0.0 && cfg.box_margin_fraction.is_finite()) {
            return Err(Error::config("box margin must be finite and ≥ 0"));
        }
        let d = 2 * targets;
        Ok(Self {
            noise: FilterNoiseModel::with_alpha(cfg.alpha)?,
            gate: ConsistencyGate::new(grid.len(), cfg.consistency.p_value)?,
            rule: RadialRule::new(d)?,
            dirs: DirectionSet::simplex(d)?,
            bounds: BoxConstraints::around_extent(targets, &grid.extent(), cfg.box_margin_fraction * grid.spacing())?,
            grid,
            mm,
            cfg,
            targets,
        })
    }

    pub fn config(&self) -> &FilterConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &SensorGrid {
        &self.grid
    }

    /// The measurement model the filter assumes.
    pub fn measurement(&self) -> &MeasurementModel {
        &self.mm
    }

    pub fn noise(&self) -> &FilterNoiseModel {
        &self.noise
    }

    pub fn gate(&self) -> &ConsistencyGate {
        &self.gate
    }

    pub fn bounds(&self) -> &BoxConstraints {
        &self.bounds
    }

    pub fn near_sensor_threshold(&self) -> f64 {
        self.cfg.near_sensor_fraction * self.grid.spacing()
    }

    pub fn step(&self, belief: &GaussianBelief, frame: &MeasurementFrame) -> Result<StepOutput> {
        let start = Instant::now();
        let prior = propagate_prior(belief, &self.noise)?;
        let mut out = self.update(&prior, frame)?;
        out.seconds = start.elapsed().as_secs_f64();
        Ok(out)
    }

    /// Everything after propagation: estimation, recovery and the moment
    /// update against one frame.
    pub fn update(&self, prior: &PropagatedPrior, frame: &MeasurementFrame) -> Result<StepOutput> {
        let start = Instant::now();
        Error::check_len("measurement frame", self.grid.len(), frame.len())?;
        Error::check_len("targets", self.targets, prior.targets())?;
        let (grid, mm, opts) = (&self.grid, &self.mm, &self.cfg.optimizer);
        let obj = CombinedObjective::new(grid, mm, frame, Some(prior), self.targets);

        let mut best = minimize(&obj, &self.bounds.project(&prior.mean_x()), &self.bounds, opts)?;
        let first = self.gate.check(&best.x_ml, frame, grid, mm);
        let mut gate = first;
        let mut actions = Vec::new();
        if !gate.consistent && self.cfg.one_by_one {
            let rec = one_by_one_recovery(frame, grid, mm, prior, &self.bounds, opts, &self.gate)?;
            actions.push(RecoveryAction::OneByOne {
                attempts: rec.attempts,
                consistent: rec.gate.consistent,
            });
            if rec.gate.statistic < gate.statistic {
                best = rec.result;
                gate = rec.gate;
            }
        }
        if !gate.consistent && self.cfg.hopping {
            let rec = square_hopping_recovery(
                &best.x_ml,
                frame,
                grid,
                mm,
                prior,
                &self.bounds,
                &self.cfg.consistency,
                opts,
                &self.gate,
            )?;
            actions.push(RecoveryAction::SquareHopping {
                attempts: rec.attempts,
                consistent: rec.gate.consistent,
            });
            if rec.gate.statistic < gate.statistic {
                best = rec.result;
                gate = rec.gate;
            }
        }

        let repaired = repair_hessian(&best.x_ml, frame, grid, mm, prior, &self.bounds, opts)?;
        if !repaired.exclusions.is_empty() {
            actions.push(RecoveryAction::HessianRepair {
                pairs: repaired.exclusions.pairs().to_vec(),
            });
        }
        let x = repaired.x_ml;
        let mut points = sigma_points(&x, &repaired.hessian, &self.rule, &self.dirs)?;
        if self.cfg.nonlinear_correction {
            let threshold = self.near_sensor_threshold();
            let mut cov = None;
            for c in 0..self.targets {
                let p = target_position(&x, c);
                let (s, dist) = grid.nearest_sensor(&p);
                if dist >= threshold {
                    continue;
                }
                let cov = match &cov {
                    Some(m) => m,
                    None => cov.insert(
                        repaired
                            .hessian
                            .clone()
                            .cholesky()
                            .ok_or_else(|| Error::numerical("repaired Hessian lost definiteness"))?
                            .inverse(),
                    ),
                };
                let block = Matrix2::new(cov[(2 * c, 2 * c)], cov[(2 * c, 2 * c + 1)], cov[(2 * c + 1, 2 * c)], cov[(2 * c + 1, 2 * c + 1)]);
                let polar = PolarFrame::new(s, grid.position(s), &p, &block)?;
                if polar_sigma_adjust(&mut points, c, &polar, &self.rule, &self.dirs)? {
                    actions.push(RecoveryAction::Polar { target: c, sensor: s });
                }
            }
        }
        let set = weigh_points(points, &self.rule, &|p| obj.value(p))?;
        let (m_x, sigma_xx) = spatial_moments(&set);
        let velocity = velocity_moments(prior, &m_x, &sigma_xx)?;
        let posterior = assemble(m_x, sigma_xx, velocity)?.floored(COVARIANCE_FLOOR);
        let belief = posterior.to_belief()?;
        Ok(StepOutput {
            posterior,
            belief,
            x_ml: x,
            statistic: first.statistic,
            consistent: gate.consistent,
            actions,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Initial belief for a track, drawn from the seed's init stream.
    pub fn initial_belief(&self, truth: &TargetState, seed: u64) -> Result<GaussianBelief> {
        let mut rng = rng::stream(seed, Stream::Init);
        init_belief(self.cfg.init_mode(), truth, &self.grid, &self.cfg, &mut rng)
    }

    pub fn track(&self, trajectory: &Trajectory, seed: u64) -> Result<TrackOutput> {
        let init = self.initial_belief(&trajectory.initial, seed)?;
        self.track_from(trajectory, init)
    }

    /// Runs every frame of `trajectory` starting from `belief`.
    pub fn track_from(&self, trajectory: &Trajectory, mut belief: GaussianBelief) -> Result<TrackOutput> {
        Error::check_len("initial belief targets", self.targets, belief.targets())?;
        let mut record = TrackRecord::with_capacity(trajectory.len());
        let mut steps = Vec::with_capacity(trajectory.len());
        for (t, (state, frame)) in trajectory.states.iter().zip(&trajectory.frames).enumerate() {
            let start = Instant::now();
            let prior = propagate_prior(&belief, &self.noise).map_err(|e| Error::Step {
                step: t + 1,
                source: Box::new(e),
            })?;
            let estimate = match self.update(&prior, frame) {
                Ok(out) => {
                    belief = out.belief.clone();
                    let m = out.posterior.m_x.clone();
                    steps.push(Some(out));
                    m
                }
                Err(e) => {
                    log::warn!("step {}: {e}; continuing from the prior", t + 1);
                    record.failures.push(StepFailure {
                        step: t + 1,
                        message: e.to_string(),
                    });
                    belief = prior.to_belief()?;
                    steps.push(None);
                    prior.mean_x()
                }
            };
            record.push(&estimate, &state.position_points(), start.elapsed().as_secs_f64())?;
        }
        Ok(TrackOutput { record, steps })
    }
}
