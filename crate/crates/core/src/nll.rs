//! Negative log-likelihoods of the measurement model and of the propagated
//! Gaussian prior, with analytic gradients and Hessians over the stacked
//! target positions `(x₁, y₁, …, x_C, y_C)`.

use nalgebra::{DMatrix, DVector, Matrix4};

use crate::error::{Error, Result};
use crate::linalg::{check_psd, symmetrize};
use crate::model::{target_position, MeasurementFrame, MeasurementModel, SensorGrid};

/// Value, gradient and Hessian of an NLL at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct NllReport {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl NllReport {
    pub fn zeros(dim: usize) -> Self {
        Self {
            value: 0.0,
            grad: DVector::zeros(dim),
            hess: DMatrix::zeros(dim, dim),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grad.iter().all(|v| v.is_finite()) && self.hess.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Add for NllReport {
    type Output = NllReport;

    fn add(self, rhs: NllReport) -> NllReport {
        NllReport {
            value: self.value + rhs.value,
            grad: self.grad + rhs.grad,
            hess: self.hess + rhs.hess,
        }
    }
}

/// Joint Gaussian over stacked `(positions; velocities)`, length `4C`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if mean.is_empty() || !mean.len().is_multiple_of(4) {
            return Err(Error::config(format!("belief mean length {} is not a positive multiple of 4", mean.len())));
        }
        Error::check_len("belief covariance rows", mean.len(), cov.nrows())?;
        Error::check_len("belief covariance cols", mean.len(), cov.ncols())?;
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numerical("belief has non-finite entries"));
        }
        let scale = cov.amax().max(f64::MIN_POSITIVE);
        if (&cov - cov.transpose()).amax() > 1e-10 * scale {
            return Err(Error::numerical("belief covariance is not symmetric"));
        }
        check_psd(&cov, 1e-8, "belief covariance")?;
        Ok(Self { mean, cov })
    }

    pub fn targets(&self) -> usize {
        self.mean.len() / 4
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn positions(&self) -> DVector<f64> {
        self.mean.rows(0, 2 * self.targets()).into_owned()
    }

    pub fn velocities(&self) -> DVector<f64> {
        let n = 2 * self.targets();
        self.mean.rows(n, n).into_owned()
    }
}

/// The filter's assumed per-target process covariance `V'`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterNoiseModel {
    v_prime: Matrix4<f64>,
}

impl FilterNoiseModel {
    pub const DEFAULT_ALPHA: f64 = 3.0;

    /// `V'` with spatial variance `alpha`, velocity variance `0.03` and
    /// position-velocity covariance `0.1`.
    pub fn with_alpha(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be positive, got {alpha}")));
        }
        Self::new(Matrix4::new(
            alpha, 0.0, 0.1, 0.0, //
            0.0, alpha, 0.0, 0.1, //
            0.1, 0.0, 0.03, 0.0, //
            0.0, 0.1, 0.0, 0.03,
        ))
    }

    pub fn new(v_prime: Matrix4<f64>) -> Result<Self> {
        if (v_prime - v_prime.transpose()).amax() > 1e-12 * v_prime.amax().max(1.0) {
            return Err(Error::config("V' must be symmetric"));
        }
        crate::linalg::psd_sqrt(&v_prime, 1e-12)?;
        Ok(Self { v_prime })
    }

    pub fn v_prime(&self) -> &Matrix4<f64> {
        &self.v_prime
    }
}

/// Stacked-layout index of component `k` (`x, y, ẋ, ẏ`) of target `c`.
pub fn stacked_index(targets: usize, c: usize, k: usize) -> usize {
    if k < 2 {
        2 * c + k
    } else {
        2 * targets + 2 * c + (k - 2)
    }
}

/// Block transition `[[I, I], [0, I]]` over `4C` stacked coordinates.
pub fn stacked_transition(targets: usize) -> DMatrix<f64> {
    let n = 2 * targets;
    let mut f = DMatrix::identity(2 * n, 2 * n);
    for i in 0..n {
        f[(i, n + i)] = 1.0;
    }
    f
}

/// `V'` replicated per target in the stacked layout.
pub fn stacked_noise(targets: usize, v: &Matrix4<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(4 * targets, 4 * targets);
    for c in 0..targets {
        for a in 0..4 {
            for b in 0..4 {
                out[(stacked_index(targets, c, a), stacked_index(targets, c, b))] = v[(a, b)];
            }
        }
    }
    out
}

/// The previous belief pushed through the motion model with noise `V'`.
#[derive(Debug, Clone)]
pub struct PropagatedPrior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub cov_xx: DMatrix<f64>,
    pub cov_vx: DMatrix<f64>,
    pub cov_vv: DMatrix<f64>,
    pub cov_xx_inv: DMatrix<f64>,
}

impl PropagatedPrior {
    pub fn targets(&self) -> usize {
        self.mean.len() / 4
    }

    pub fn mean_x(&self) -> DVector<f64> {
        self.mean.rows(0, 2 * self.targets()).into_owned()
    }

    pub fn mean_v(&self) -> DVector<f64> {
        let n = 2 * self.targets();
        self.mean.rows(n, n).into_owned()
    }

    /// Propagated moments as a belief (used when a step has to be skipped).
    pub fn to_belief(&self) -> Result<GaussianBelief> {
        GaussianBelief::new(self.mean.clone(), self.cov.clone())
    }
}

pub fn propagate_prior(belief: &GaussianBelief, fm: &FilterNoiseModel) -> Result<PropagatedPrior> {
    let c = belief.targets();
    let n = 2 * c;
    let f = stacked_transition(c);
    let mean = &f * belief.mean();
    let mut cov = &f * belief.cov() * f.transpose() + stacked_noise(c, fm.v_prime());
    symmetrize(&mut cov);
    check_psd(&cov, 1e-8, "propagated covariance")?;

    let cov_xx = cov.view((0, 0), (n, n)).into_owned();
    let cov_vx = cov.view((n, 0), (n, n)).into_owned();
    let cov_vv = cov.view((n, n), (n, n)).into_owned();
    let chol = cov_xx
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("propagated spatial covariance is not positive definite"))?;
    let mut cov_xx_inv = chol.inverse();
    symmetrize(&mut cov_xx_inv);
    Ok(PropagatedPrior {
        mean,
        cov,
        cov_xx,
        cov_vx,
        cov_vv,
        cov_xx_inv,
    })
}

/// Inverse variances per sensor, zero for sensors masked out (or with
/// infinite variance).
fn sensor_weights(grid: &SensorGrid, mm: &MeasurementModel, active: Option<&[bool]>) -> Vec<f64> {
    (0..grid.len())
        .map(|s| {
            if active.is_some_and(|a| !a[s]) {
                0.0
            } else {
                1.0 / mm.sigma2(s)
            }
        })
        .collect()
}

/// `Σ_s (α_s − a_s)² / (2σ_s²)` only, skipping derivatives.
pub fn measurement_value(
    positions: &DVector<f64>,
    frame: &MeasurementFrame,
    grid: &SensorGrid,
    mm: &MeasurementModel,
    active: Option<&[bool]>,
) -> f64 {
    let targets = positions.len() / 2;
    let mut value = 0.0;
    for (s, sensor) in grid.positions().iter().enumerate() {
        if active.is_some_and(|a| !a[s]) {
            continue;
        }
        let w = 1.0 / mm.sigma2(s);
        if w == 0.0 {
            continue;
        }
        let alpha: f64 = (0..targets).map(|c| mm.signal(&(target_position(positions, c) - sensor))).sum();
        let e = alpha - frame.amplitudes[s];
        value += 0.5 * w * e * e;
    }
    value
}

/// Measurement NLL over the sensors in `active` (all when `None`).
pub fn measurement_nll_masked(
    positions: &DVector<f64>,
    frame: &MeasurementFrame,
    grid: &SensorGrid,
    mm: &MeasurementModel,
    active: Option<&[bool]>,
) -> NllReport {
    let targets = positions.len() / 2;
    let dim = 2 * targets;
    let weights = sensor_weights(grid, mm, active);
    let mut out = NllReport::zeros(dim);
    let mut terms = Vec::with_capacity(targets);
    for (s, sensor) in grid.positions().iter().enumerate() {
        let w = weights[s];
        if w == 0.0 {
            continue;
        }
        terms.clear();
        terms.extend((0..targets).map(|c| mm.signal_term(&(target_position(positions, c) - sensor))));
        let alpha: f64 = terms.iter().map(|t| t.value).sum();
        let e = alpha - frame.amplitudes[s];
        out.value += 0.5 * w * e * e;
        for (c, tc) in terms.iter().enumerate() {
            let (i, j) = (2 * c, 2 * c + 1);
            out.grad[i] += w * e * tc.grad.x;
            out.grad[j] += w * e * tc.grad.y;
            // Curvature of the signal itself only touches the target's own block.
            for a in 0..2 {
                for b in 0..2 {
                    out.hess[(i + a, i + b)] += w * e * tc.hess[(a, b)];
                }
            }
            // Gauss-Newton outer product, including cross-target blocks.
            for (c2, tc2) in terms.iter().enumerate() {
                for a in 0..2 {
                    for b in 0..2 {
                        out.hess[(2 * c + a, 2 * c2 + b)] += w * tc.grad[a] * tc2.grad[b];
                    }
                }
            }
        }
    }
    symmetrize(&mut out.hess);
    out
}

pub fn measurement_nll(
    positions: &DVector<f64>,
    frame: &MeasurementFrame,
    grid: &SensorGrid,
    mm: &MeasurementModel,
) -> NllReport {
    measurement_nll_masked(positions, frame, grid, mm, None)
}

/// `½ (x − m)ᵀ Σ_xx⁻¹ (x − m)` with its gradient and (constant) Hessian.
pub fn prior_nll(positions: &DVector<f64>, prior: &PropagatedPrior) -> NllReport {
    let diff = positions - prior.mean_x();
    let grad = &prior.cov_xx_inv * &diff;
    NllReport {
        value: 0.5 * diff.dot(&grad),
        grad,
        hess: prior.cov_xx_inv.clone(),
    }
}

pub fn prior_value(positions: &DVector<f64>, prior: &PropagatedPrior) -> f64 {
    let diff = positions - prior.mean_x();
    0.5 * diff.dot(&(&prior.cov_xx_inv * &diff))
}

pub fn combined_nll(
    positions: &DVector<f64>,
    frame: &MeasurementFrame,
    grid: &SensorGrid,
    mm: &MeasurementModel,
    prior: &PropagatedPrior,
) -> NllReport {
    measurement_nll(positions, frame, grid, mm) + prior_nll(positions, prior)
}

/// Something the optimizer can minimize.
pub trait Objective {
    fn dim(&self) -> usize;

    fn value(&self, x: &DVector<f64>) -> f64;

    fn report(&self, x: &DVector<f64>) -> NllReport;
}

/// Measurement NLL (optionally over a subset of sensors) plus the prior NLL.
#[derive(Debug, Clone, Copy)]
pub struct CombinedObjective<'a> {
    pub grid: &'a SensorGrid,
    pub mm: &'a MeasurementModel,
    pub frame: &'a MeasurementFrame,
    pub prior: Option<&'a PropagatedPrior>,
    pub active: Option<&'a [bool]>,
    pub targets: usize,
}

impl<'a> CombinedObjective<'a> {
    pub fn new(
        grid: &'a SensorGrid,
        mm: &'a MeasurementModel,
        frame: &'a MeasurementFrame,
        prior: Option<&'a PropagatedPrior>,
        targets: usize,
    ) -> Self {
        Self {
            grid,
            mm,
            frame,
            prior,
            active: None,
            targets,
        }
    }

    pub fn with_active(mut self, active: Option<&'a [bool]>) -> Self {
        self.active = active;
        self
    }
}

impl Objective for CombinedObjective<'_> {
    fn dim(&self) -> usize {
        2 * self.targets
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        let meas = measurement_value(x, self.frame, self.grid, self.mm, self.active);
        match self.prior {
            Some(p) => meas + prior_value(x, p),
            None => meas,
        }
    }

    fn report(&self, x: &DVector<f64>) -> NllReport {
        let meas = measurement_nll_masked(x, self.frame, self.grid, self.mm, self.active);
        match self.prior {
            Some(p) => meas + prior_nll(x, p),
            None => meas,
        }
    }
}
