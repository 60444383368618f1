//! Goodness-of-fit gate on the ML estimate and the two recovery procedures
//! used when the gate rejects it: one-by-one sensor addition and square
//! hopping.

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::error::{Error, Result};
use crate::model::{expected_signal, target_position, MeasurementFrame, MeasurementModel, SensorGrid};
use crate::nll::{measurement_value, CombinedObjective, Objective, PropagatedPrior};
use crate::optimizer::{minimize, BoxConstraints, OptimizeOptions, OptimizeResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyConfig {
    /// Upper-tail probability of the χ² gate.
    pub p_value: f64,
    /// Targets relocated by square hopping.
    pub n_bad_tgt: usize,
    /// Highest-deficit squares considered by square hopping.
    pub n_bad_sq: usize,
    /// Cap on the square subsets tried.
    pub max_subsets: usize,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            p_value: 0.0013,
            n_bad_tgt: 2,
            n_bad_sq: 12,
            max_subsets: 66,
        }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self, targets: usize, squares: usize) -> Result<()> {
        if !(self.p_value > 0.0 && self.p_value < 1.0) {
            return Err(Error::config(format!("p_value must lie in (0, 1), got {}", self.p_value)));
        }
        if self.n_bad_tgt == 0 || self.n_bad_tgt > targets {
            return Err(Error::config(format!(
                "n_bad_tgt must lie in 1..={targets}, got {}",
                self.n_bad_tgt
            )));
        }
        if self.n_bad_sq == 0 || self.n_bad_sq > squares {
            return Err(Error::config(format!(
                "n_bad_sq must lie in 1..={squares}, got {}",
                self.n_bad_sq
            )));
        }
        if self.max_subsets == 0 {
            return Err(Error::config("max_subsets must be positive"));
        }
        Ok(())
    }
}

/// Upper-tail quantile `q` of χ²_dof with `P(χ² > q) = p_value`.
///
/// Inverts the regularized upper incomplete gamma function by bisection.
pub fn chi2_threshold(dof: usize, p_value: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::config("χ² needs at least one degree of freedom"));
    }
    if !(p_value > 0.0 && p_value < 1.0) {
        return Err(Error::config(format!("p_value must lie in (0, 1), got {p_value}")));
    }
    let k = 0.5 * dof as f64;
    let tail = |q: f64| gamma_ur(k, 0.5 * q);
    let mut lo = 0.0;
    let mut hi = dof as f64;
    while tail(hi) > p_value {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if tail(mid) > p_value {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// χ² test of the measurement residuals at a candidate estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyGate {
    pub dof: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub consistent: bool,
    /// `Σ_s (α_s − a_s)² / σ_s²`, twice the measurement NLL.
    pub statistic: f64,
}

impl ConsistencyGate {
    pub fn new(sensors: usize, p_value: f64) -> Result<Self> {
        Ok(Self {
            dof: sensors,
            threshold: chi2_threshold(sensors, p_value)?,
        })
    }

    pub fn statistic(&self, positions: &DVector<f64>, frame: &MeasurementFrame, grid: &SensorGrid, mm: &MeasurementModel) -> f64 {
        2.0 * measurement_value(positions, frame, grid, mm, None)
    }

    pub fn check(&self, positions: &DVector<f64>, frame: &MeasurementFrame, grid: &SensorGrid, mm: &MeasurementModel) -> GateOutcome {
        self.judge(self.statistic(positions, frame, grid, mm))
    }

    pub fn judge(&self, statistic: f64) -> GateOutcome {
        GateOutcome {
            consistent: statistic <= self.threshold,
            statistic,
        }
    }
}

/// One-off gate evaluation with `S` degrees of freedom.
pub fn is_consistent(
    positions: &DVector<f64>,
    frame: &MeasurementFrame,
    grid: &SensorGrid,
    mm: &MeasurementModel,
    cfg: &ConsistencyConfig,
) -> Result<GateOutcome> {
    Ok(ConsistencyGate::new(grid.len(), cfg.p_value)?.check(positions, frame, grid, mm))
}

/// Unused sensor whose minimum distance to the current target estimates is
/// largest; ties go to the lower sensor index.
pub fn maximin_sensor(grid: &SensorGrid, used: &[bool], positions: &DVector<f64>) -> Option<usize> {
    let targets = positions.len() / 2;
    let mut best: Option<(usize, f64)> = None;
    for (s, sensor) in grid.positions().iter().enumerate() {
        if used[s] {
            continue;
        }
        let nearest = (0..targets)
            .map(|c| (target_position(positions, c) - sensor).norm())
            .fold(f64::INFINITY, f64::min);
        if best.is_none_or(|(_, d)| nearest > d) {
            best = Some((s, nearest));
        }
    }
    best.map(|(s, _)| s)
}

/// Outcome of a recovery procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    pub result: OptimizeResult,
    pub gate: GateOutcome,
    /// Optimizations run (sensor additions or square subsets tried).
    pub attempts: usize,
    /// Sensors in the order they were enabled (one-by-one only).
    pub sensor_order: Vec<usize>,
}

/// Starts from the boundary sensors and enables the remaining sensors one at
/// a time, re-optimizing after each addition.
///
/// Each addition picks the unused sensor farthest from every current target
/// estimate, so the nearby sensors that create local minima come in last.
#[allow(clippy::too_many_arguments)]
pub fn one_by_one_recovery(
    frame: &MeasurementFrame,
    grid: &SensorGrid,
    mm: &MeasurementModel,
    prior: &PropagatedPrior,
    bounds: &BoxConstraints,
    opts: &OptimizeOptions,
    gate: &ConsistencyGate,
) -> Result<Recovery> {
    let boundary = grid.boundary();
    if boundary.is_empty() {
        return Err(Error::config("grid has no boundary sensors"));
    }
    let targets = prior.targets();
    let mut used = vec![false; grid.len()];
    for &s in &boundary {
        used[s] = true;
    }
    let mut order = boundary.clone();
    let mut attempts = 0;

    let solve = |used: &[bool], x0: &DVector<f64>| {
        let obj = CombinedObjective::new(grid, mm, frame, Some(prior), targets).with_active(Some(used));
        minimize(&obj, x0, bounds, opts)
    };

    let mut result = solve(&used, &prior.mean_x())?;
    attempts += 1;
    while let Some(s) = maximin_sensor(grid, &used, &result.x_ml) {
        used[s] = true;
        order.push(s);
        result = solve(&used, &result.x_ml)?;
        attempts += 1;
    }
    let gate = gate.check(&result.x_ml, frame, grid, mm);
    Ok(Recovery {
        result,
        gate,
        attempts,
        sensor_order: order,
    })
}

/// Per-target signal excess `ε(c) = Σ_s max((α_s − a_s) − f_{s,c}, 0)`.
pub fn signal_excess(positions: &DVector<f64>, frame: &MeasurementFrame, grid: &SensorGrid, mm: &MeasurementModel) -> Vec<f64> {
    let alpha = expected_signal(positions, grid, mm);
    (0..positions.len() / 2)
        .map(|c| {
            let x = target_position(positions, c);
            grid.positions()
                .iter()
                .enumerate()
                .map(|(s, sensor)| ((alpha[s] - frame.amplitudes[s]) - mm.signal(&(x - sensor))).max(0.0))
                .sum()
        })
        .collect()
}

/// Per-sensor signal deficit `δ(s) = max(a_s − α_s, 0)`.
pub fn signal_deficit(positions: &DVector<f64>, frame: &MeasurementFrame, grid: &SensorGrid, mm: &MeasurementModel) -> Vec<f64> {
    let alpha = expected_signal(positions, grid, mm);
    (0..grid.len()).map(|s| (frame.amplitudes[s] - alpha[s]).max(0.0)).collect()
}

/// Indices of the `k` largest values, ties broken by lower index.
fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= n {
        rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    }
    out
}

/// Grid squares ranked by the summed deficit at their corners, after the
/// given targets have been taken out of the expected signal.
pub fn ranked_squares(
    positions: &DVector<f64>,
    removed: &[usize],
    frame: &MeasurementFrame,
    grid: &SensorGrid,
    mm: &MeasurementModel,
) -> Vec<(usize, f64)> {
    let kept: Vec<f64> = (0..positions.len() / 2)
        .filter(|c| !removed.contains(c))
        .flat_map(|c| [positions[2 * c], positions[2 * c + 1]])
        .collect();
    let deficit = signal_deficit(&DVector::from_vec(kept), frame, grid, mm);
    let squares = grid.squares();
    let scores: Vec<f64> = squares.iter().map(|sq| sq.corners.iter().map(|&s| deficit[s]).sum()).collect();
    top_k(&scores, scores.len()).into_iter().map(|i| (i, scores[i])).collect()
}

/// Moves the worst-excess targets to the centers of high-deficit grid
/// squares and re-optimizes, trying square subsets in descending total
/// deficit until one passes the gate.
///
/// If `x_est` already passes, it is returned untouched. Otherwise the first
/// passing candidate is returned, or the candidate with the smallest gate
/// statistic when none pass (never worse than `x_est` itself).
#[allow(clippy::too_many_arguments)]
pub fn square_hopping_recovery(
    x_est: &DVector<f64>,
    frame: &MeasurementFrame,
    grid: &SensorGrid,
    mm: &MeasurementModel,
    prior: &PropagatedPrior,
    bounds: &BoxConstraints,
    cfg: &ConsistencyConfig,
    opts: &OptimizeOptions,
    gate: &ConsistencyGate,
) -> Result<Recovery> {
    let targets = x_est.len() / 2;
    let obj = CombinedObjective::new(grid, mm, frame, Some(prior), targets);
    let incoming = gate.check(x_est, frame, grid, mm);
    let start = Recovery {
        result: OptimizeResult::at(x_est.clone(), obj.value(x_est), bounds),
        gate: incoming,
        attempts: 0,
        sensor_order: Vec::new(),
    };
    if incoming.consistent {
        return Ok(start);
    }

    let n_bad = cfg.n_bad_tgt.min(targets);
    let excess = signal_excess(x_est, frame, grid, mm);
    let mut bad = top_k(&excess, n_bad);
    bad.sort_unstable();

    let ranked = ranked_squares(x_est, &bad, frame, grid, mm);
    let top: Vec<(usize, f64)> = ranked.into_iter().take(cfg.n_bad_sq).collect();
    let mut combos = subsets(top.len(), n_bad);
    let combo_score = |combo: &Vec<usize>| combo.iter().map(|&i| top[i].1).sum::<f64>();
    combos.sort_by(|a, b| combo_score(b).total_cmp(&combo_score(a)).then_with(|| a.cmp(b)));
    combos.truncate(cfg.max_subsets);

    let squares = grid.squares();
    let mut best = start;
    for (tried, combo) in combos.iter().enumerate() {
        let mut x0 = x_est.clone();
        for (&c, &rank) in bad.iter().zip(combo) {
            let center: Vector2<f64> = squares[top[rank].0].center;
            x0[2 * c] = center.x;
            x0[2 * c + 1] = center.y;
        }
        let result = minimize(&obj, &x0, bounds, opts)?;
        let outcome = gate.check(&result.x_ml, frame, grid, mm);
        let candidate = Recovery {
            result,
            gate: outcome,
            attempts: tried + 1,
            sensor_order: Vec::new(),
        };
        if outcome.consistent {
            return Ok(candidate);
        }
        if outcome.statistic < best.gate.statistic {
            best = candidate;
        }
        best.attempts = tried + 1;
    }
    Ok(best)
}
