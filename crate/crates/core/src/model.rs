//! Sensor grid, target motion and amplitude measurement models, and the
//! scenario simulator.

use std::io::Write;

use nalgebra::{DVector, Matrix2, Matrix4, Vector2, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::psd_sqrt;
use crate::rng::{self, Stream};

/// Distances below this are clamped inside the signal model and all of its
/// derivatives (the `p = 1` gradient is singular at the sensor).
pub const MIN_DISTANCE: f64 = 1e-6;

/// Axis-aligned bounding box in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Extent {
    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= self.min[0] && p.x <= self.max[0] && p.y >= self.min[1] && p.y <= self.max[1]
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
        )
    }
}

/// One cell of the sensor grid, bounded by four sensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSquare {
    pub index: usize,
    pub corners: [usize; 4],
    pub center: Vector2<f64>,
}

/// Rectangular array of sensors, indexed row-major from the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorGrid {
    positions: Vec<Vector2<f64>>,
    rows: usize,
    cols: usize,
    spacing: f64,
    extent: Extent,
}

impl SensorGrid {
    /// Builds a `rows × cols` grid with the given spacing, anchored at the
    /// origin. Sensor `s = r * cols + c` sits at `(c · spacing, r · spacing)`.
    pub fn new(rows: usize, cols: usize, spacing: f64) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(Error::config(format!(
                "sensor grid needs at least 2×2 sensors, got {rows}×{cols}"
            )));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::config(format!("grid spacing must be positive, got {spacing}")));
        }
        let positions = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| Vector2::new(c as f64 * spacing, r as f64 * spacing)))
            .collect();
        Ok(Self {
            positions,
            rows,
            cols,
            spacing,
            extent: Extent {
                min: [0.0, 0.0],
                max: [(cols - 1) as f64 * spacing, (rows - 1) as f64 * spacing],
            },
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn extent(&self) -> Extent {
        self.extent
    }

    pub fn positions(&self) -> &[Vector2<f64>] {
        &self.positions
    }

    pub fn position(&self, s: usize) -> Vector2<f64> {
        self.positions[s]
    }

    /// Sensors on the perimeter of the grid, in index order.
    pub fn boundary(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&s| {
                let (r, c) = (s / self.cols, s % self.cols);
                r == 0 || c == 0 || r == self.rows - 1 || c == self.cols - 1
            })
            .collect()
    }

    /// All `(rows − 1) × (cols − 1)` grid cells, row-major.
    pub fn squares(&self) -> Vec<GridSquare> {
        let mut out = Vec::with_capacity((self.rows - 1) * (self.cols - 1));
        for r in 0..self.rows - 1 {
            for c in 0..self.cols - 1 {
                let s00 = r * self.cols + c;
                let corners = [s00, s00 + 1, s00 + self.cols, s00 + self.cols + 1];
                let center = Vector2::new((c as f64 + 0.5) * self.spacing, (r as f64 + 0.5) * self.spacing);
                out.push(GridSquare {
                    index: out.len(),
                    corners,
                    center,
                });
            }
        }
        out
    }

    /// Closest sensor to `p` and its distance; ties go to the lower index.
    pub fn nearest_sensor(&self, p: &Vector2<f64>) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (s, q) in self.positions.iter().enumerate() {
            let d = (p - q).norm();
            if d < best.1 {
                best = (s, d);
            }
        }
        best
    }

    /// The sensor nearest the middle of the grid.
    pub fn central_sensor(&self) -> usize {
        self.nearest_sensor(&self.extent.center()).0
    }
}

/// Constant-velocity motion with additive Gaussian process noise.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionModel {
    transition: Matrix4<f64>,
    process_cov: Matrix4<f64>,
    gamma: f64,
}

/// Per-target state transition for a unit time step, in `(x, y, ẋ, ẏ)` order.
pub fn transition_matrix() -> Matrix4<f64> {
    Matrix4::new(
        1.0, 0.0, 1.0, 0.0, //
        0.0, 1.0, 0.0, 1.0, //
        0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    )
}

impl MotionModel {
    /// Default process-noise multiplier.
    pub const DEFAULT_GAMMA: f64 = 0.05;

    /// Process noise `γ · [[1/3, ½], [½, 1]] ⊗ I₂`.
    pub fn constant_velocity(gamma: f64) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::config(format!("process-noise multiplier must be ≥ 0, got {gamma}")));
        }
        let base = Matrix4::new(
            1.0 / 3.0, 0.0, 0.5, 0.0, //
            0.0, 1.0 / 3.0, 0.0, 0.5, //
            0.5, 0.0, 1.0, 0.0, //
            0.0, 0.5, 0.0, 1.0,
        );
        Ok(Self {
            transition: transition_matrix(),
            process_cov: base * gamma,
            gamma,
        })
    }

    /// Constant-velocity transition with an arbitrary process covariance.
    pub fn with_covariance(process_cov: Matrix4<f64>) -> Result<Self> {
        if (process_cov - process_cov.transpose()).amax() > 1e-12 * process_cov.amax().max(1.0) {
            return Err(Error::config("process covariance must be symmetric"));
        }
        psd_sqrt(&process_cov, 1e-12)?;
        Ok(Self {
            transition: transition_matrix(),
            process_cov,
            gamma: f64::NAN,
        })
    }

    pub fn transition(&self) -> &Matrix4<f64> {
        &self.transition
    }

    pub fn process_cov(&self) -> &Matrix4<f64> {
        &self.process_cov
    }

    /// The multiplier the covariance was built from (NaN for custom covariances).
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `L` with `L Lᵀ = V`.
    pub fn noise_factor(&self) -> Result<Matrix4<f64>> {
        psd_sqrt(&self.process_cov, 1e-12)
    }
}

/// Measurement noise variance, shared or per sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseVariance {
    Shared(f64),
    PerSensor(Vec<f64>),
}

impl NoiseVariance {
    pub fn get(&self, s: usize) -> f64 {
        match self {
            NoiseVariance::Shared(v) => *v,
            NoiseVariance::PerSensor(v) => v[s],
        }
    }
}

/// Expected amplitude `f(r) = A / (r^p + d0)` of one target at distance `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    amplitude: f64,
    d0: f64,
    exponent: f64,
    noise: NoiseVariance,
}

/// Value, gradient and Hessian of one target's signal at one sensor, with
/// respect to the target position.
#[derive(Debug, Clone, Copy)]
pub struct SignalTerm {
    pub value: f64,
    pub grad: Vector2<f64>,
    pub hess: Matrix2<f64>,
}

impl MeasurementModel {
    pub const DEFAULT_AMPLITUDE: f64 = 10.0;
    pub const DEFAULT_D0: f64 = 0.1;

    /// Zero noise variance is accepted here (noise-free simulation); the
    /// likelihood-based consumers require strictly positive variances.
    pub fn new(amplitude: f64, d0: f64, exponent: f64, noise: NoiseVariance) -> Result<Self> {
        for (name, v) in [("amplitude", amplitude), ("d0", d0), ("exponent", exponent)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        let bad = match &noise {
            NoiseVariance::Shared(v) => !(*v >= 0.0),
            NoiseVariance::PerSensor(v) => v.is_empty() || v.iter().any(|x| !(*x >= 0.0)),
        };
        if bad {
            return Err(Error::config("measurement noise variance must be ≥ 0"));
        }
        Ok(Self {
            amplitude,
            d0,
            exponent,
            noise,
        })
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn d0(&self) -> f64 {
        self.d0
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn noise(&self) -> &NoiseVariance {
        &self.noise
    }

    pub fn sigma2(&self, s: usize) -> f64 {
        self.noise.get(s)
    }

    /// Copy with a different noise variance.
    pub fn with_noise(&self, noise: NoiseVariance) -> Result<Self> {
        Self::new(self.amplitude, self.d0, self.exponent, noise)
    }

    pub(crate) fn check_sensors(&self, sensors: usize) -> Result<()> {
        if let NoiseVariance::PerSensor(v) = &self.noise {
            Error::check_len("per-sensor noise variances", sensors, v.len())?;
        }
        Ok(())
    }

    /// Requires every variance to be strictly positive (infinite is allowed
    /// and disables the sensor).
    pub fn check_likelihood_ready(&self, sensors: usize) -> Result<()> {
        self.check_sensors(sensors)?;
        if (0..sensors).any(|s| !(self.sigma2(s) > 0.0)) {
            return Err(Error::config("measurement noise variance must be > 0 for filtering"));
        }
        Ok(())
    }

    /// `f` for a target-sensor offset `r = x_c − x_[s]`.
    pub fn signal(&self, r: &Vector2<f64>) -> f64 {
        let dist = r.norm().max(MIN_DISTANCE);
        self.amplitude / (dist.powf(self.exponent) + self.d0)
    }

    /// `f`, `∇f` and `∇²f` for a target-sensor offset.
    ///
    /// With `ρ = ‖r‖²` and `f = A / (ρ^{p/2} + d0)`:
    /// `∇f = g r` where `g = −p A ρ^{p/2−1} / (ρ^{p/2} + d0)²`, and
    /// `∇²f = g [I + 2 ((p/2 − 1)/ρ − p ρ^{p/2−1} / (ρ^{p/2} + d0)) r rᵀ]`.
    /// Inside the clamp radius the signal is constant.
    pub fn signal_term(&self, r: &Vector2<f64>) -> SignalTerm {
        let rho = r.norm_squared();
        let p = self.exponent;
        if rho < MIN_DISTANCE * MIN_DISTANCE {
            return SignalTerm {
                value: self.amplitude / (MIN_DISTANCE.powf(p) + self.d0),
                grad: Vector2::zeros(),
                hess: Matrix2::zeros(),
            };
        }
        let rp = rho.powf(0.5 * p);
        let denom = rp + self.d0;
        let value = self.amplitude / denom;
        // ρ^{p/2−1} = r^p / ρ
        let rp_over_rho = rp / rho;
        let g = -p * self.amplitude * rp_over_rho / (denom * denom);
        let k = 2.0 * ((0.5 * p - 1.0) / rho - p * rp_over_rho / denom);
        let hess = (Matrix2::identity() + r * r.transpose() * k) * g;
        SignalTerm {
            value,
            grad: r * g,
            hess,
        }
    }
}

/// Stacked `(x, y)` position of target `c` in a `2C` vector.
pub fn target_position(positions: &DVector<f64>, c: usize) -> Vector2<f64> {
    Vector2::new(positions[2 * c], positions[2 * c + 1])
}

/// Expected amplitude at every sensor given stacked target positions.
pub fn expected_signal(positions: &DVector<f64>, grid: &SensorGrid, mm: &MeasurementModel) -> DVector<f64> {
    let targets = positions.len() / 2;
    DVector::from_iterator(
        grid.len(),
        grid.positions().iter().map(|sensor| {
            (0..targets)
                .map(|c| mm.signal(&(target_position(positions, c) - sensor)))
                .sum::<f64>()
        }),
    )
}

/// Position and velocity of each target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetState {
    /// One `(x, y, ẋ, ẏ)` row per target.
    pub targets: Vec<[f64; 4]>,
}

impl TargetState {
    pub fn new(targets: Vec<[f64; 4]>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::config("at least one target is required"));
        }
        if targets.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("target states must be finite"));
        }
        Ok(Self { targets })
    }

    pub fn count(&self) -> usize {
        self.targets.len()
    }

    pub fn target(&self, c: usize) -> Vector4<f64> {
        Vector4::from(self.targets[c])
    }

    /// Stacked `(x₁, y₁, …, x_C, y_C)`.
    pub fn positions(&self) -> DVector<f64> {
        DVector::from_iterator(2 * self.count(), self.targets.iter().flat_map(|t| [t[0], t[1]]))
    }

    /// Stacked `(positions; velocities)` of length `4C`.
    pub fn stacked(&self) -> DVector<f64> {
        let pos = self.targets.iter().flat_map(|t| [t[0], t[1]]);
        let vel = self.targets.iter().flat_map(|t| [t[2], t[3]]);
        DVector::from_iterator(4 * self.count(), pos.chain(vel))
    }

    pub fn position_points(&self) -> Vec<Vector2<f64>> {
        self.targets.iter().map(|t| Vector2::new(t[0], t[1])).collect()
    }
}

/// Received amplitudes at one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementFrame {
    pub amplitudes: DVector<f64>,
}

impl MeasurementFrame {
    pub fn new(amplitudes: DVector<f64>) -> Self {
        Self { amplitudes }
    }

    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }
}

/// Advances every target by `F x + ν`, `ν ~ N(0, V)` independently.
pub fn propagate_truth<R: Rng + ?Sized>(state: &TargetState, motion: &MotionModel, rng: &mut R) -> Result<TargetState> {
    let factor = motion.noise_factor()?;
    Ok(step_targets(state, motion, &factor, rng))
}

fn step_targets<R: Rng + ?Sized>(state: &TargetState, motion: &MotionModel, factor: &Matrix4<f64>, rng: &mut R) -> TargetState {
    let targets = state
        .targets
        .iter()
        .map(|t| step_one(&Vector4::from(*t), motion, factor, rng).into())
        .collect();
    TargetState { targets }
}

fn step_one<R: Rng + ?Sized>(x: &Vector4<f64>, motion: &MotionModel, factor: &Matrix4<f64>, rng: &mut R) -> Vector4<f64> {
    let z = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    motion.transition() * x + factor * z
}

/// Starting states used when a 4-target scenario gives none explicitly.
pub const STANDARD_INITIAL_STATES: [[f64; 4]; 4] = [
    [12.0, 6.0, 0.001, 0.001],
    [32.0, 32.0, -0.001, -0.005],
    [20.0, 13.0, -0.1, 0.01],
    [15.0, 35.0, 0.002, 0.002],
];

/// Everything needed to simulate and to filter one configuration.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub grid: SensorGrid,
    pub motion: MotionModel,
    pub measurement: MeasurementModel,
    pub targets: usize,
    /// Fixed starting states; drawn uniformly over the grid when absent.
    pub initial: Option<TargetState>,
    /// Redraw a target's path until it stays inside the grid extent.
    pub confine: bool,
}

/// JSON form of a [`Scenario`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    pub targets: usize,
    pub amplitude: f64,
    pub d0: f64,
    pub exponent: f64,
    pub sigma_s2: NoiseVariance,
    pub gamma: f64,
    pub initial_states: Option<Vec<[f64; 4]>>,
    pub confine: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            rows: 5,
            cols: 5,
            spacing: 10.0,
            targets: 4,
            amplitude: MeasurementModel::DEFAULT_AMPLITUDE,
            d0: MeasurementModel::DEFAULT_D0,
            exponent: 1.0,
            sigma_s2: NoiseVariance::Shared(0.01),
            gamma: MotionModel::DEFAULT_GAMMA,
            initial_states: None,
            confine: true,
        }
    }
}

impl ScenarioConfig {
    pub fn build(&self) -> Result<Scenario> {
        let grid = SensorGrid::new(self.rows, self.cols, self.spacing)?;
        let motion = MotionModel::constant_velocity(self.gamma)?;
        let measurement = MeasurementModel::new(self.amplitude, self.d0, self.exponent, self.sigma_s2.clone())?;
        measurement.check_sensors(grid.len())?;
        if self.targets == 0 {
            return Err(Error::config("at least one target is required"));
        }
        let initial = match &self.initial_states {
            Some(states) => {
                Error::check_len("initial target states", self.targets, states.len())?;
                Some(TargetState::new(states.clone())?)
            }
            None if self.targets <= STANDARD_INITIAL_STATES.len() && self.rows == 5 && self.cols == 5 && self.spacing == 10.0 => {
                Some(TargetState::new(STANDARD_INITIAL_STATES[..self.targets].to_vec())?)
            }
            None => None,
        };
        Ok(Scenario {
            grid,
            motion,
            measurement,
            targets: self.targets,
            initial,
            confine: self.confine,
        })
    }
}

/// Ground truth and measurements for one simulated track.
///
/// `states[t]` and `frames[t]` belong to time step `t + 1`; the state at
/// time zero is `initial`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub initial: TargetState,
    pub states: Vec<TargetState>,
    pub frames: Vec<MeasurementFrame>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Truth rows `t, c, x, y, vx, vy` (with `t = 0` for the initial state).
    pub fn write_truth_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,c,x,y,vx,vy")?;
        for (t, state) in std::iter::once(&self.initial).chain(&self.states).enumerate() {
            for (c, s) in state.targets.iter().enumerate() {
                writeln!(w, "{t},{c},{},{},{},{}", s[0], s[1], s[2], s[3])?;
            }
        }
        Ok(())
    }

    /// Frame rows `t, s, a` for `t = 1..=T`.
    pub fn write_frames_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,s,a")?;
        for (t, frame) in self.frames.iter().enumerate() {
            for (s, a) in frame.amplitudes.iter().enumerate() {
                writeln!(w, "{},{s},{a}", t + 1)?;
            }
        }
        Ok(())
    }
}

const MAX_CONFINE_ATTEMPTS: usize = 100_000;

/// Simulates `steps` time steps of truth and noisy amplitudes.
///
/// Reproducible per seed: truth and measurement noise come from separate
/// streams of the seed.
pub fn simulate(scenario: &Scenario, steps: usize, seed: u64) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::config("a trajectory needs at least one step"));
    }
    let grid = &scenario.grid;
    scenario.measurement.check_sensors(grid.len())?;
    let factor = scenario.motion.noise_factor()?;
    let mut truth_rng = rng::stream(seed, Stream::Truth);
    let extent = grid.extent();

    let initial = match &scenario.initial {
        Some(s) => {
            Error::check_len("initial target states", scenario.targets, s.count())?;
            s.clone()
        }
        None => TargetState::new(
            (0..scenario.targets)
                .map(|_| {
                    [
                        truth_rng.random_range(extent.min[0]..=extent.max[0]),
                        truth_rng.random_range(extent.min[1]..=extent.max[1]),
                        0.0,
                        0.0,
                    ]
                })
                .collect(),
        )?,
    };

    // Targets move independently, so drawing each path separately (and
    // redrawing it when it leaves the grid) samples the joint process
    // conditioned on every target staying inside.
    let mut paths: Vec<Vec<Vector4<f64>>> = Vec::with_capacity(scenario.targets);
    for c in 0..scenario.targets {
        let start = initial.target(c);
        let mut attempts = 0;
        let path = loop {
            attempts += 1;
            let mut x = start;
            let mut path = Vec::with_capacity(steps);
            let mut inside = true;
            for _ in 0..steps {
                x = step_one(&x, &scenario.motion, &factor, &mut truth_rng);
                if scenario.confine && !extent.contains(&Vector2::new(x[0], x[1])) {
                    inside = false;
                    break;
                }
                path.push(x);
            }
            if inside {
                break path;
            }
            if attempts >= MAX_CONFINE_ATTEMPTS {
                return Err(Error::config(format!(
                    "target {c} could not be kept inside the grid after {attempts} attempts"
                )));
            }
        };
        paths.push(path);
    }

    let states: Vec<TargetState> = (0..steps)
        .map(|t| TargetState {
            targets: paths.iter().map(|p| p[t].into()).collect(),
        })
        .collect();

    let mut meas_rng = rng::stream(seed, Stream::Measurement);
    let frames = states
        .iter()
        .map(|state| {
            let alpha = expected_signal(&state.positions(), grid, &scenario.measurement);
            let noisy = DVector::from_iterator(
                grid.len(),
                alpha.iter().enumerate().map(|(s, a)| {
                    let sd = scenario.measurement.sigma2(s).sqrt();
                    a + sd * meas_rng.sample::<f64, _>(StandardNormal)
                }),
            );
            MeasurementFrame::new(noisy)
        })
        .collect();

    Ok(Trajectory {
        initial,
        states,
        frames,
    })
}
