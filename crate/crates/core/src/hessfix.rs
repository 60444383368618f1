//! Hessian repair for the near-far problem.
//!
//! A target sitting almost on top of a sensor produces a signal so peaked
//! that the NLL Hessian at the optimum can lose positive definiteness. The
//! repair excludes the closest target-sensor pair, freezes that target,
//! drops that sensor and re-optimizes the remaining targets until the reduced
//! Hessian is positive definite. Frozen targets get a fixed precision of
//! `d0⁻²` per coordinate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::is_positive_definite;
use crate::model::{target_position, MeasurementFrame, MeasurementModel, SensorGrid};
use crate::nll::{CombinedObjective, NllReport, Objective, PropagatedPrior};
use crate::optimizer::{minimize, BoxConstraints, OptimizeOptions};

/// Excluded `(target, sensor)` pairs in the order they were added.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExclusionList {
    pairs: Vec<(usize, usize)>,
}

impl ExclusionList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, target: usize, sensor: usize) -> Result<()> {
        if self.pairs.contains(&(target, sensor)) {
            return Err(Error::numerical(format!("pair ({target}, {sensor}) is already excluded")));
        }
        self.pairs.push((target, sensor));
        Ok(())
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn excludes_target(&self, c: usize) -> bool {
        self.pairs.iter().any(|&(t, _)| t == c)
    }

    pub fn excludes_sensor(&self, s: usize) -> bool {
        self.pairs.iter().any(|&(_, t)| t == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairedHessian {
    pub hessian: DMatrix<f64>,
    /// Estimate after re-optimization; frozen targets keep their position.
    pub x_ml: DVector<f64>,
    pub exclusions: ExclusionList,
}

/// The combined objective over the free coordinates only, with frozen
/// coordinates held at `base` and excluded sensors masked out.
struct Reduced<'a> {
    inner: CombinedObjective<'a>,
    base: DVector<f64>,
    free: Vec<usize>,
}

impl Reduced<'_> {
    fn embed(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut x = self.base.clone();
        for (k, &i) in self.free.iter().enumerate() {
            x[i] = z[k];
        }
        x
    }

    fn restrict(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.free.len(), self.free.iter().map(|&i| x[i]))
    }
}

impl Objective for Reduced<'_> {
    fn dim(&self) -> usize {
        self.free.len()
    }

    fn value(&self, z: &DVector<f64>) -> f64 {
        self.inner.value(&self.embed(z))
    }

    fn report(&self, z: &DVector<f64>) -> NllReport {
        let full = self.inner.report(&self.embed(z));
        let n = self.free.len();
        NllReport {
            value: full.value,
            grad: DVector::from_iterator(n, self.free.iter().map(|&i| full.grad[i])),
            hess: DMatrix::from_fn(n, n, |a, b| full.hess[(self.free[a], self.free[b])]),
        }
    }
}

/// Returns a positive definite Hessian for the sigma-point stage, repairing
/// the combined-NLL Hessian at `x_ml` when it is not.
#[allow(clippy::too_many_arguments)]
pub fn repair_hessian(
    x_ml: &DVector<f64>,
    frame: &MeasurementFrame,
    grid: &SensorGrid,
    mm: &MeasurementModel,
    prior: &PropagatedPrior,
    bounds: &BoxConstraints,
    opts: &OptimizeOptions,
) -> Result<RepairedHessian> {
    let targets = x_ml.len() / 2;
    Error::check_len("estimate", 2 * prior.targets(), x_ml.len())?;
    let full = CombinedObjective::new(grid, mm, frame, Some(prior), targets);
    let hessian = full.report(x_ml).hess;
    if is_positive_definite(&hessian) {
        return Ok(RepairedHessian {
            hessian,
            x_ml: x_ml.clone(),
            exclusions: ExclusionList::new(),
        });
    }

    let mut x = x_ml.clone();
    let mut exclusions = ExclusionList::new();
    let mut active = vec![true; grid.len()];
    let reduced_hessian = loop {
        let (c, s) = closest_free_pair(&x, grid, &exclusions)
            .ok_or_else(|| Error::HessianRepair("no target left to exclude".into()))?;
        exclusions.push(c, s)?;
        active[s] = false;
        log::debug!("excluding target {c} / sensor {s} from the Hessian");

        let free: Vec<usize> = (0..targets)
            .filter(|&t| !exclusions.excludes_target(t))
            .flat_map(|t| [2 * t, 2 * t + 1])
            .collect();
        if free.is_empty() {
            break DMatrix::zeros(0, 0);
        }
        let reduced = Reduced {
            inner: full.with_active(Some(&active)),
            base: x.clone(),
            free: free.clone(),
        };
        let result = minimize(&reduced, &reduced.restrict(&x), &bounds.restrict(&free), opts)?;
        x = reduced.embed(&result.x_ml);
        let h = reduced.report(&result.x_ml).hess;
        if is_positive_definite(&h) {
            break h;
        }
    };

    let free: Vec<usize> = (0..targets)
        .filter(|&t| !exclusions.excludes_target(t))
        .flat_map(|t| [2 * t, 2 * t + 1])
        .collect();
    let fixed = mm.d0().powi(-2);
    let mut hessian = DMatrix::zeros(2 * targets, 2 * targets);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            hessian[(i, j)] = reduced_hessian[(a, b)];
        }
    }
    for c in (0..targets).filter(|&t| exclusions.excludes_target(t)) {
        hessian[(2 * c, 2 * c)] = fixed;
        hessian[(2 * c + 1, 2 * c + 1)] = fixed;
    }
    if !is_positive_definite(&hessian) {
        return Err(Error::HessianRepair(format!(
            "repaired Hessian still fails Cholesky after {} exclusions",
            exclusions.len()
        )));
    }
    Ok(RepairedHessian {
        hessian,
        x_ml: x,
        exclusions,
    })
}

/// Closest pair between a not-yet-frozen target and any sensor.
fn closest_free_pair(x: &DVector<f64>, grid: &SensorGrid, exclusions: &ExclusionList) -> Option<(usize, usize)> {
    let mut best: Option<(f64, usize, usize)> = None;
    for c in (0..x.len() / 2).filter(|&c| !exclusions.excludes_target(c)) {
        let p = target_position(x, c);
        for (s, sensor) in grid.positions().iter().enumerate() {
            let d = (p - sensor).norm();
            if best.is_none_or(|(bd, _, _)| d < bd) {
                best = Some((d, c, s));
            }
        }
    }
    best.map(|(_, c, s)| (c, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{expected_signal, NoiseVariance};
    use crate::nll::{propagate_prior, FilterNoiseModel, GaussianBelief};

    fn setup(mean_x: &[f64], spatial_var: f64) -> (SensorGrid, MeasurementModel, PropagatedPrior, BoxConstraints) {
        let grid = SensorGrid::new(5, 5, 10.0).unwrap();
        let mm = MeasurementModel::new(10.0, 0.1, 1.0, NoiseVariance::Shared(0.1)).unwrap();
        let c = mean_x.len() / 2;
        let mut mean = DVector::zeros(4 * c);
        mean.rows_mut(0, 2 * c).copy_from_slice(mean_x);
        let mut cov = DMatrix::identity(4 * c, 4 * c) * 0.0005;
        for i in 0..2 * c {
            cov[(i, i)] = spatial_var;
        }
        let belief = GaussianBelief::new(mean, cov).unwrap();
        let prior = propagate_prior(&belief, &FilterNoiseModel::with_alpha(3.0).unwrap()).unwrap();
        let bounds = BoxConstraints::around_extent(c, &grid.extent(), 10.0).unwrap();
        (grid, mm, prior, bounds)
    }

    #[test]
    fn pd_hessian_is_untouched() {
        let x = DVector::from_vec(vec![13.0, 16.0]);
        let (grid, mm, prior, bounds) = setup(x.as_slice(), 100.0);
        let frame = MeasurementFrame::new(expected_signal(&x, &grid, &mm));
        let out = repair_hessian(&x, &frame, &grid, &mm, &prior, &bounds, &OptimizeOptions::default()).unwrap();
        assert!(out.exclusions.is_empty());
        assert_eq!(out.x_ml, x);
        let direct = CombinedObjective::new(&grid, &mm, &frame, Some(&prior), 1).report(&x).hess;
        assert_eq!(out.hessian, direct);
    }

    #[test]
    fn near_sensor_target_gets_fixed_block() {
        // Target 0 sits 1 cm from sensor (20, 20) with the observed signal
        // far below what it predicts: the curvature there is negative.
        let x = DVector::from_vec(vec![20.01, 20.0, 33.0, 27.0]);
        let (grid, mm, prior, bounds) = setup(x.as_slice(), 1e4);
        let mut amps = expected_signal(&x, &grid, &mm);
        amps[12] -= 40.0;
        let frame = MeasurementFrame::new(amps);
        let before = CombinedObjective::new(&grid, &mm, &frame, Some(&prior), 2).report(&x).hess;
        assert!(!is_positive_definite(&before));

        let out = repair_hessian(&x, &frame, &grid, &mm, &prior, &bounds, &OptimizeOptions::default()).unwrap();
        assert_eq!(out.exclusions.pairs()[0], (0, 12));
        assert!(out.exclusions.len() <= 2 * grid.len());
        let h = &out.hessian;
        assert!(is_positive_definite(h));
        assert!((h[(0, 0)] - 100.0).abs() < 1e-12);
        assert_eq!(h[(1, 1)], h[(0, 0)]);
        assert_eq!(h[(0, 1)], 0.0);
        for i in 0..2 {
            for j in 2..4 {
                assert_eq!(h[(i, j)], 0.0);
                assert_eq!(h[(j, i)], 0.0);
            }
        }
        // frozen target keeps its position
        assert_eq!(out.x_ml[0], 20.01);
        assert_eq!(out.x_ml[1], 20.0);
    }

    #[test]
    fn exclusion_list_rejects_duplicates() {
        let mut e = ExclusionList::new();
        e.push(1, 3).unwrap();
        assert!(e.push(1, 3).is_err());
        assert!(e.excludes_target(1) && e.excludes_sensor(3));
        assert!(!e.excludes_target(3));
    }
}
