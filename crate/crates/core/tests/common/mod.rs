//! Independent oracles shared by the integration tests. The oracles never
//! call into the library's own numerics; only the fixtures at the bottom do.
#![allow(dead_code)]

use amptrack::model::{expected_signal, MeasurementFrame, MeasurementModel, NoiseVariance, SensorGrid};
use amptrack::nll::{propagate_prior, FilterNoiseModel, GaussianBelief, PropagatedPrior};
use nalgebra::{DMatrix, DVector, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;

/// Central-difference gradient of `f`.
pub fn fd_gradient(f: &dyn Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut p = x.clone();
        let mut m = x.clone();
        p[i] += h;
        m[i] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    })
}

/// Central-difference Jacobian of a gradient field, symmetrized.
pub fn fd_hessian(g: &dyn Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut p = x.clone();
        let mut m = x.clone();
        p[j] += h;
        m[j] -= h;
        out.set_column(j, &((g(&p) - g(&m)) / (2.0 * h)));
    }
    (&out + out.transpose()) * 0.5
}

pub fn relative_error(approx: &[f64], exact: &[f64]) -> f64 {
    let diff: f64 = approx.iter().zip(exact).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let norm: f64 = exact.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm.max(f64::MIN_POSITIVE)
}

/// Every permutation of `0..n` (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, a, out);
            if k.is_multiple_of(2) {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
        }
    }
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    heap(n, &mut a, &mut out);
    out
}

/// Minimum over all permutations of the mean matched distance, summed in
/// estimate order.
pub fn brute_force_omat(est: &[Vector2<f64>], truth: &[Vector2<f64>]) -> f64 {
    let n = est.len();
    permutations(n)
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| (est[i] - truth[j]).norm()).sum::<f64>() / n as f64)
        .fold(f64::INFINITY, f64::min)
}

/// `ln Γ(k/2)` by the recurrences from `Γ(1) = 1` and `Γ(1/2) = √π`.
fn ln_gamma_half(k: usize) -> f64 {
    let (mut x, mut acc) = if k.is_multiple_of(2) { (1.0, 0.0) } else { (0.5, 0.5 * std::f64::consts::PI.ln()) };
    while x < 0.5 * k as f64 - 1e-9 {
        acc += f64::ln(x);
        x += 1.0;
    }
    acc
}

pub fn chi2_pdf(dof: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let k = 0.5 * dof as f64;
    ((k - 1.0) * x.ln() - 0.5 * x - k * std::f64::consts::LN_2 - ln_gamma_half(dof)).exp()
}

/// `P(χ² > q)` by composite Simpson integration of the density over
/// `[q, q + 600]`.
pub fn chi2_upper_tail(dof: usize, q: f64) -> f64 {
    let n = 120_000;
    let h = 600.0 / n as f64;
    let mut s = chi2_pdf(dof, q) + chi2_pdf(dof, q + 600.0);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * chi2_pdf(dof, q + i as f64 * h);
    }
    s * h / 3.0
}

/// Upper-tail quantile from [`chi2_upper_tail`] by bisection.
pub fn chi2_quantile(dof: usize, p: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 10.0 * dof as f64 + 100.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if chi2_upper_tail(dof, mid) > p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn grid() -> SensorGrid {
    SensorGrid::new(5, 5, 10.0).unwrap()
}

pub fn model(sigma2: f64) -> MeasurementModel {
    MeasurementModel::new(10.0, 0.1, 1.0, NoiseVariance::Shared(sigma2)).unwrap()
}

/// A random evaluation point, a noisy frame from a different random truth
/// and a random prior, all for `targets` targets on the 5x5 grid.
pub struct Problem {
    pub x: DVector<f64>,
    pub frame: MeasurementFrame,
    pub prior: PropagatedPrior,
}

pub fn random_problem<R: Rng>(rng: &mut R, targets: usize, grid: &SensorGrid, mm: &MeasurementModel) -> Problem {
    let d = 2 * targets;
    let uniform = |rng: &mut R| DVector::from_fn(d, |_, _| rng.random_range(0.0..40.0));
    let x = uniform(rng);
    let truth = uniform(rng);
    let amps = expected_signal(&truth, grid, mm).map(|a| a + 0.3 * rng.sample::<f64, _>(StandardNormal));
    let mut mean = DVector::zeros(2 * d);
    mean.rows_mut(0, d).copy_from(&uniform(rng));
    for i in d..2 * d {
        mean[i] = rng.random_range(-0.5..0.5);
    }
    let a = DMatrix::from_fn(2 * d, 2 * d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let cov = &a * a.transpose() * 0.5 + DMatrix::identity(2 * d, 2 * d);
    let belief = GaussianBelief::new(mean, cov).unwrap();
    let prior = propagate_prior(&belief, &FilterNoiseModel::with_alpha(3.0).unwrap()).unwrap();
    Problem {
        x,
        frame: MeasurementFrame::new(amps),
        prior,
    }
}
