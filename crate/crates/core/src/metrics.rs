//! Evaluation: the OMAT distance between estimated and true target sets,
//! per-track records, and the bootstrap particle filter used as a baseline.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix4, Vector2, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, psd_sqrt_dyn};
use crate::model::{MeasurementModel, SensorGrid, Trajectory};
use crate::nll::{FilterNoiseModel, GaussianBelief};
use crate::rng::{self, Stream};

/// OMAT value and the assignment `estimate c → truth assignment[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OmatResult {
    pub value: f64,
    pub assignment: Vec<usize>,
}

/// Optimal-assignment average distance (order 1) between equal-size sets.
pub fn omat(estimates: &[Vector2<f64>], truths: &[Vector2<f64>]) -> Result<OmatResult> {
    Error::check_len("OMAT point sets", truths.len(), estimates.len())?;
    let n = estimates.len();
    if n == 0 {
        return Err(Error::config("OMAT needs at least one point"));
    }
    let cost = DMatrix::from_fn(n, n, |i, j| (estimates[i] - truths[j]).norm());
    let assignment = min_cost_assignment(&cost);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    Ok(OmatResult {
        value: total / n as f64,
        assignment,
    })
}

/// Hungarian method with row/column potentials, `O(n³)`. Returns the
/// column assigned to each row.
pub fn min_cost_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    // 1-based with column 0 as a virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    assignment
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepFailure {
    pub step: usize,
    pub message: String,
}

/// Per-step outcome of running one tracker over one trajectory.
///
/// Step `t` (1-based) is stored at index `t − 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackRecord {
    pub estimates: Vec<Vec<[f64; 2]>>,
    pub omat: Vec<f64>,
    /// Wall time per step; the only field that differs between reruns.
    pub step_seconds: Vec<f64>,
    pub failures: Vec<StepFailure>,
}

impl TrackRecord {
    pub fn with_capacity(steps: usize) -> Self {
        Self {
            estimates: Vec::with_capacity(steps),
            omat: Vec::with_capacity(steps),
            step_seconds: Vec::with_capacity(steps),
            failures: Vec::new(),
        }
    }

    /// Records the estimate for the next step and scores it against `truth`.
    pub fn push(&mut self, estimate: &DVector<f64>, truth: &[Vector2<f64>], seconds: f64) -> Result<()> {
        let points: Vec<Vector2<f64>> = (0..estimate.len() / 2)
            .map(|c| Vector2::new(estimate[2 * c], estimate[2 * c + 1]))
            .collect();
        self.omat.push(omat(&points, truth)?.value);
        self.estimates.push(points.iter().map(|p| [p.x, p.y]).collect());
        self.step_seconds.push(seconds);
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.omat.len()
    }

    pub fn mean_omat(&self) -> f64 {
        mean(&self.omat)
    }

    pub fn mean_step_seconds(&self) -> f64 {
        mean(&self.step_seconds)
    }

    /// Equality of everything except timing.
    pub fn same_result(&self, other: &Self) -> bool {
        self.estimates == other.estimates && self.omat == other.omat && self.failures == other.failures
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BpfConfig {
    pub particles: usize,
    /// Resample when the effective sample size drops below this fraction of
    /// the particle count.
    pub ess_fraction: f64,
}

impl Default for BpfConfig {
    fn default() -> Self {
        Self {
            particles: 100_000,
            ess_fraction: 0.5,
        }
    }
}

impl BpfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::config("the particle filter needs at least one particle"));
        }
        if !(0.0..=1.0).contains(&self.ess_fraction) {
            return Err(Error::config(format!(
                "ESS fraction must lie in [0, 1], got {}",
                self.ess_fraction
            )));
        }
        Ok(())
    }
}

/// Bootstrap particle filter state: `particles × targets` blocks of
/// `(x, y, vx, vy)` in one flat buffer, plus normalized log-weights.
#[derive(Debug, Clone)]
pub struct ParticleCloud {
    pub states: Vec<f64>,
    pub log_weights: Vec<f64>,
    pub targets: usize,
}

impl ParticleCloud {
    /// Draws from a belief in the stacked layout.
    pub fn sample<R: Rng + ?Sized>(belief: &GaussianBelief, n: usize, rng: &mut R) -> Result<Self> {
        let c = belief.targets();
        let root = psd_sqrt_dyn(belief.cov(), 1e-8)?;
        let mut states = Vec::with_capacity(n * 4 * c);
        let mut xi = DVector::zeros(4 * c);
        for _ in 0..n {
            xi.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let z = belief.mean() + &root * &xi;
            for t in 0..c {
                states.extend_from_slice(&[z[2 * t], z[2 * t + 1], z[2 * c + 2 * t], z[2 * c + 2 * t + 1]]);
            }
        }
        Ok(Self {
            states,
            log_weights: vec![-(n as f64).ln(); n],
            targets: c,
        })
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    fn stride(&self) -> usize {
        4 * self.targets
    }

    /// Constant-velocity move plus noise `root · ξ` per target.
    pub fn propagate<R: Rng + ?Sized>(&mut self, root: &Matrix4<f64>, rng: &mut R) {
        for s in self.states.chunks_exact_mut(4) {
            let xi = Vector4::from_fn(|_, _| rng.sample(StandardNormal));
            let noise = root * xi;
            s[0] += s[2] + noise[0];
            s[1] += s[3] + noise[1];
            s[2] += noise[2];
            s[3] += noise[3];
        }
    }

    /// Multiplies in the Gaussian amplitude likelihood and renormalizes.
    pub fn reweight(&mut self, amplitudes: &DVector<f64>, grid: &SensorGrid, mm: &MeasurementModel) {
        let stride = self.stride();
        let sensors = grid.positions();
        let inv_var: Vec<f64> = (0..sensors.len()).map(|s| 1.0 / mm.sigma2(s)).collect();
        let (a, d0, p) = (mm.amplitude(), mm.d0(), mm.exponent());
        for (state, lw) in self.states.chunks_exact(stride).zip(self.log_weights.iter_mut()) {
            let mut nll = 0.0;
            for (s, sensor) in sensors.iter().enumerate() {
                if inv_var[s] == 0.0 {
                    continue;
                }
                let mut alpha = 0.0;
                for t in state.chunks_exact(4) {
                    let r = (t[0] - sensor.x).hypot(t[1] - sensor.y).max(crate::model::MIN_DISTANCE);
                    let rp = if p == 1.0 { r } else { r.powf(p) };
                    alpha += a / (rp + d0);
                }
                let e = alpha - amplitudes[s];
                nll += 0.5 * inv_var[s] * e * e;
            }
            *lw -= nll;
        }
        self.normalize();
    }

    fn normalize(&mut self) {
        let max = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = if max.is_finite() {
            self.log_weights.iter().map(|w| (w - max).exp()).sum()
        } else {
            f64::NAN
        };
        if !(total.is_finite() && total > 0.0) {
            log::warn!("particle weights collapsed; resetting to uniform");
            let uniform = -(self.len() as f64).ln();
            self.log_weights.iter_mut().for_each(|w| *w = uniform);
            return;
        }
        let shift = max + total.ln();
        self.log_weights.iter_mut().for_each(|w| *w -= shift);
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.log_weights.iter().map(|w| (2.0 * w).exp()).sum::<f64>()
    }

    /// Weighted mean of the target positions, `[x1, y1, …]`.
    pub fn mean_positions(&self) -> DVector<f64> {
        let mut out = DVector::zeros(2 * self.targets);
        for (state, w) in self.states.chunks_exact(self.stride()).zip(self.weights()) {
            for (t, s) in state.chunks_exact(4).enumerate() {
                out[2 * t] += w * s[0];
                out[2 * t + 1] += w * s[1];
            }
        }
        out
    }

    /// Systematic resampling to uniform weights.
    pub fn resample<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let n = self.len();
        let stride = self.stride();
        let weights = self.weights();
        let step = 1.0 / n as f64;
        let mut u = rng.random::<f64>() * step;
        let mut next = Vec::with_capacity(self.states.len());
        let mut cum = weights[0];
        let mut i = 0;
        for _ in 0..n {
            while u > cum && i + 1 < n {
                i += 1;
                cum += weights[i];
            }
            next.extend_from_slice(&self.states[i * stride..(i + 1) * stride]);
            u += step;
        }
        self.states = next;
        self.log_weights.iter_mut().for_each(|w| *w = -(n as f64).ln());
    }
}

/// Runs the bootstrap particle filter over a trajectory from `init`.
#[allow(clippy::too_many_arguments)]
pub fn bpf_track(
    trajectory: &Trajectory,
    grid: &SensorGrid,
    mm: &MeasurementModel,
    noise: &FilterNoiseModel,
    init: &GaussianBelief,
    cfg: &BpfConfig,
    seed: u64,
) -> Result<TrackRecord> {
    cfg.validate()?;
    mm.check_likelihood_ready(grid.len())?;
    let mut rng = rng::stream(seed, Stream::Particles);
    let root = psd_sqrt(noise.v_prime(), 1e-8)?;
    let mut cloud = ParticleCloud::sample(init, cfg.particles, &mut rng)?;
    let mut record = TrackRecord::with_capacity(trajectory.len());
    for (state, frame) in trajectory.states.iter().zip(&trajectory.frames) {
        let start = Instant::now();
        cloud.propagate(&root, &mut rng);
        cloud.reweight(&frame.amplitudes, grid, mm);
        let estimate = cloud.mean_positions();
        if cloud.effective_sample_size() < cfg.ess_fraction * cloud.len() as f64 {
            cloud.resample(&mut rng);
        }
        record.push(&estimate, &state.position_points(), start.elapsed().as_secs_f64())?;
    }
    Ok(record)
}
