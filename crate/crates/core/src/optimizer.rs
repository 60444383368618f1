//! Box-constrained projected Newton minimization.
//!
//! Each iteration fixes the variables that sit on a bound with the gradient
//! pushing outward, takes a Newton step on the rest (Levenberg-shifted until
//! the reduced Hessian factors), caps it to the trust radius and backtracks
//! along the projection arc. When the Newton arc fails to decrease the
//! objective, a projected steepest-descent arc is tried instead.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Extent;
use crate::nll::Objective;

/// Elementwise bounds on the stacked position vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxConstraints {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl BoxConstraints {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        Error::check_len("box upper bounds", lower.len(), upper.len())?;
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l < u)) {
            return Err(Error::config("box lower bounds must be below upper bounds"));
        }
        Ok(Self { lower, upper })
    }

    /// The same rectangle for every target, widened by `margin` on each side.
    pub fn around_extent(targets: usize, extent: &Extent, margin: f64) -> Result<Self> {
        let lower = DVector::from_fn(2 * targets, |i, _| extent.min[i % 2] - margin);
        let upper = DVector::from_fn(2 * targets, |i, _| extent.max[i % 2] + margin);
        Self::new(lower, upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        x.zip_zip_map(&self.lower, &self.upper, |v, l, u| v.clamp(l, u))
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.iter().zip(self.lower.iter().zip(self.upper.iter())).all(|(v, (l, u))| v >= l && v <= u)
    }

    /// Keeps only the listed coordinates.
    pub fn restrict(&self, coords: &[usize]) -> Self {
        Self {
            lower: DVector::from_iterator(coords.len(), coords.iter().map(|&i| self.lower[i])),
            upper: DVector::from_iterator(coords.len(), coords.iter().map(|&i| self.upper[i])),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeOptions {
    /// Convergence threshold on the ∞-norm of the projected gradient.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Trust radius: Newton steps longer than this are scaled back (meters).
    pub max_step: f64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 200,
            max_step: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub x_ml: DVector<f64>,
    pub nll_value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Coordinates sitting on a bound at the returned point.
    pub active_set: Vec<usize>,
}

impl OptimizeResult {
    /// A result describing an unoptimized point.
    pub fn at(x: DVector<f64>, value: f64, bounds: &BoxConstraints) -> Self {
        let active_set = active_coords(&x, bounds);
        Self {
            x_ml: x,
            nll_value: value,
            iterations: 0,
            converged: false,
            active_set,
        }
    }
}

fn active_coords(x: &DVector<f64>, bounds: &BoxConstraints) -> Vec<usize> {
    (0..x.len())
        .filter(|&i| x[i] <= bounds.lower[i] || x[i] >= bounds.upper[i])
        .collect()
}

fn projected_gradient_norm(x: &DVector<f64>, g: &DVector<f64>, bounds: &BoxConstraints) -> f64 {
    (0..x.len())
        .map(|i| ((x[i] - g[i]).clamp(bounds.lower[i], bounds.upper[i]) - x[i]).abs())
        .fold(0.0, f64::max)
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;
const MAX_SHIFTS: usize = 200;

/// Solves `(H + λI) d = −g` with the smallest `λ` from the doubling sequence
/// that makes the shifted matrix factor.
fn shifted_newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let n = h.nrows();
    if n == 0 {
        return Some(DVector::zeros(0));
    }
    if let Some(ch) = h.clone().cholesky() {
        return Some(-ch.solve(g));
    }
    let trace = h.diagonal().iter().map(|v| v.abs()).sum::<f64>();
    let mut lambda = (1e-6 * trace / n as f64).max(1e-10);
    for _ in 0..MAX_SHIFTS {
        let shifted = h + DMatrix::identity(n, n) * lambda;
        if let Some(ch) = shifted.cholesky() {
            return Some(-ch.solve(g));
        }
        lambda *= 2.0;
    }
    None
}

/// Backtracking along `P(x + t d)`; returns the accepted point and value.
fn projected_search(
    objective: &dyn Objective,
    x: &DVector<f64>,
    fx: f64,
    g: &DVector<f64>,
    d: &DVector<f64>,
    bounds: &BoxConstraints,
) -> Option<(DVector<f64>, f64)> {
    let mut t = 1.0;
    for _ in 0..MAX_BACKTRACKS {
        let trial = bounds.project(&(x + d * t));
        let moved = &trial - x;
        let decrease = g.dot(&moved);
        if moved.amax() == 0.0 {
            return None;
        }
        let f_trial = objective.value(&trial);
        if f_trial.is_finite() && decrease < 0.0 && f_trial <= fx + ARMIJO * decrease {
            return Some((trial, f_trial));
        }
        t *= 0.5;
    }
    None
}

fn cap_length(d: &mut DVector<f64>, max_step: f64) {
    let len = d.norm();
    if len > max_step {
        *d *= max_step / len;
    }
}

/// Minimizes `objective` inside `bounds`, starting from `x0` projected into
/// the box.
pub fn minimize(
    objective: &dyn Objective,
    x0: &DVector<f64>,
    bounds: &BoxConstraints,
    opts: &OptimizeOptions,
) -> Result<OptimizeResult> {
    Error::check_len("starting point", objective.dim(), x0.len())?;
    Error::check_len("box dimension", objective.dim(), bounds.dim())?;
    let n = x0.len();
    let mut x = bounds.project(x0);
    let mut report = objective.report(&x);
    if !report.is_finite() {
        return Err(Error::Optimizer("objective is not finite at the starting point".into()));
    }
    let mut iterations = 0;
    let mut converged = false;

    loop {
        if projected_gradient_norm(&x, &report.grad, bounds) <= opts.tolerance {
            converged = true;
            break;
        }
        if iterations >= opts.max_iterations {
            break;
        }
        let g = &report.grad;
        let free: Vec<usize> = (0..n)
            .filter(|&i| !((x[i] <= bounds.lower[i] && g[i] > 0.0) || (x[i] >= bounds.upper[i] && g[i] < 0.0)))
            .collect();

        let newton = {
            let h_ff = DMatrix::from_fn(free.len(), free.len(), |a, b| report.hess[(free[a], free[b])]);
            let g_f = DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]));
            shifted_newton_direction(&h_ff, &g_f).map(|d_f| {
                let mut d = DVector::zeros(n);
                for (k, &i) in free.iter().enumerate() {
                    d[i] = d_f[k];
                }
                cap_length(&mut d, opts.max_step);
                d
            })
        };

        let accepted = newton
            .and_then(|d| projected_search(objective, &x, report.value, g, &d, bounds))
            .or_else(|| {
                let mut d = -g.clone();
                cap_length(&mut d, opts.max_step);
                projected_search(objective, &x, report.value, g, &d, bounds)
            });

        match accepted {
            Some((next, _)) => {
                x = next;
                report = objective.report(&x);
                if !report.is_finite() {
                    return Err(Error::Optimizer(format!("objective became non-finite at iteration {iterations}")));
                }
                iterations += 1;
            }
            // No descent along either arc: the iterate is as good as the
            // arithmetic allows.
            None => break,
        }
    }

    Ok(OptimizeResult {
        active_set: active_coords(&x, bounds),
        nll_value: report.value,
        x_ml: x,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nll::NllReport;

    struct Quadratic {
        m: DVector<f64>,
        h: DMatrix<f64>,
    }

    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            self.m.len()
        }

        fn value(&self, x: &DVector<f64>) -> f64 {
            let d = x - &self.m;
            0.5 * d.dot(&(&self.h * &d))
        }

        fn report(&self, x: &DVector<f64>) -> NllReport {
            let d = x - &self.m;
            let grad = &self.h * &d;
            NllReport {
                value: 0.5 * d.dot(&grad),
                grad,
                hess: self.h.clone(),
            }
        }
    }

    fn unit_box(n: usize, lo: f64, hi: f64) -> BoxConstraints {
        BoxConstraints::new(DVector::from_element(n, lo), DVector::from_element(n, hi)).unwrap()
    }

    #[test]
    fn interior_quadratic_in_one_newton_step() {
        let q = Quadratic {
            m: DVector::from_vec(vec![1.0, 2.0, -1.0]),
            h: DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]),
        };
        let r = minimize(&q, &DVector::zeros(3), &unit_box(3, -5.0, 5.0), &OptimizeOptions::default()).unwrap();
        assert!(r.converged);
        assert!(r.iterations <= 2);
        assert!((r.x_ml - &q.m).amax() < 1e-12);
        assert!(r.active_set.is_empty());
    }

    #[test]
    fn bounds_respected_exactly() {
        let q = Quadratic {
            m: DVector::from_vec(vec![10.0, -10.0]),
            h: DMatrix::identity(2, 2),
        };
        let b = unit_box(2, -1.0, 1.0);
        let r = minimize(&q, &DVector::zeros(2), &b, &OptimizeOptions::default()).unwrap();
        assert_eq!(r.x_ml, DVector::from_vec(vec![1.0, -1.0]));
        assert_eq!(r.active_set, vec![0, 1]);
        assert!(r.converged);
    }

    #[test]
    fn restart_is_a_fixed_point() {
        let q = Quadratic {
            m: DVector::from_vec(vec![3.0, 0.5]),
            h: DMatrix::from_row_slice(2, 2, &[2.0, 1.5, 1.5, 2.0]),
        };
        let b = unit_box(2, -1.0, 1.0);
        let r = minimize(&q, &DVector::zeros(2), &b, &OptimizeOptions::default()).unwrap();
        let again = minimize(&q, &r.x_ml, &b, &OptimizeOptions::default()).unwrap();
        assert!(again.iterations <= 1);
        assert!((again.x_ml - r.x_ml).amax() < 1e-9);
    }

    #[test]
    fn starting_point_is_projected() {
        let q = Quadratic {
            m: DVector::zeros(2),
            h: DMatrix::identity(2, 2),
        };
        let r = minimize(&q, &DVector::from_vec(vec![100.0, -100.0]), &unit_box(2, -1.0, 1.0), &OptimizeOptions::default()).unwrap();
        assert!(r.x_ml.amax() < 1e-9);
    }

    #[test]
    fn indefinite_start_still_descends() {
        // f = x⁴/4 − x²/2 + y², indefinite at the origin-adjacent start.
        struct DoubleWell;
        impl Objective for DoubleWell {
            fn dim(&self) -> usize {
                2
            }
            fn value(&self, x: &DVector<f64>) -> f64 {
                x[0].powi(4) / 4.0 - x[0] * x[0] / 2.0 + x[1] * x[1]
            }
            fn report(&self, x: &DVector<f64>) -> NllReport {
                NllReport {
                    value: self.value(x),
                    grad: DVector::from_vec(vec![x[0].powi(3) - x[0], 2.0 * x[1]]),
                    hess: DMatrix::from_row_slice(2, 2, &[3.0 * x[0] * x[0] - 1.0, 0.0, 0.0, 2.0]),
                }
            }
        }
        let r = minimize(&DoubleWell, &DVector::from_vec(vec![0.1, 1.0]), &unit_box(2, -3.0, 3.0), &OptimizeOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.x_ml[0] - 1.0).abs() < 1e-8);
        assert!(r.x_ml[1].abs() < 1e-8);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        struct Nan;
        impl Objective for Nan {
            fn dim(&self) -> usize {
                1
            }
            fn value(&self, _: &DVector<f64>) -> f64 {
                f64::NAN
            }
            fn report(&self, _: &DVector<f64>) -> NllReport {
                NllReport {
                    value: f64::NAN,
                    grad: DVector::zeros(1),
                    hess: DMatrix::zeros(1, 1),
                }
            }
        }
        assert!(minimize(&Nan, &DVector::zeros(1), &unit_box(1, -1.0, 1.0), &OptimizeOptions::default()).is_err());
    }

    #[test]
    fn iteration_cap_reports_unconverged() {
        let q = Quadratic {
            m: DVector::from_vec(vec![100.0]),
            h: DMatrix::identity(1, 1),
        };
        let opts = OptimizeOptions {
            max_step: 1.0,
            max_iterations: 3,
            ..Default::default()
        };
        let r = minimize(&q, &DVector::zeros(1), &unit_box(1, -200.0, 200.0), &opts).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
        assert!((r.x_ml[0] - 3.0).abs() < 1e-12);
    }
}
