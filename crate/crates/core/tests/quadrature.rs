mod common;

use amptrack::quadrature::{
    build_sigma_points, inverse_polar, laguerre, polar_jacobian, polar_transform, DirectionSet, RadialRule,
};
use amptrack::moments::spatial_moments;
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.5
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

#[test]
fn quadratic_nll_moments_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for d in [2, 4, 8] {
        let rule = RadialRule::new(d).unwrap();
        let dirs = DirectionSet::simplex(d).unwrap();
        for _ in 0..10 {
            let h = random_spd(&mut rng, d);
            let m = DVector::from_fn(d, |_, _| rng.random_range(-20.0..20.0));
            let nll = |x: &DVector<f64>| 0.5 * (x - &m).dot(&(&h * (x - &m)));
            let set = build_sigma_points(&m, &h, &rule, &dirs, &nll).unwrap();
            assert_eq!(set.len(), 2 * d * (d + 1));
            let (mean, cov) = spatial_moments(&set);
            assert!((&mean - &m).norm() / m.norm() < 1e-10);
            let inv = h.clone().try_inverse().unwrap();
            assert!(rel(&cov, &inv) < 1e-10, "d = {d}: {}", rel(&cov, &inv));
        }
    }
}

#[test]
fn radial_rule_moments() {
    // Γ(a+1) and Γ(a+2) for a = d/2 − 1.
    for (d, m0, m1) in [(2, 1.0, 1.0), (4, 1.0, 2.0), (8, 6.0, 24.0), (12, 120.0, 720.0)] {
        let r = RadialRule::new(d).unwrap();
        assert!((r.w_minus + r.w_plus - m0).abs() < 1e-13 * m0);
        assert!((r.w_minus * r.z_minus + r.w_plus * r.z_plus - m1).abs() < 1e-13 * m1);
        assert!(laguerre(2, (d / 2 - 1) as f64, r.z_minus).abs() < 1e-12);
        assert!(laguerre(2, (d / 2 - 1) as f64, r.z_plus).abs() < 1e-12);
    }
    assert!(RadialRule::new(7).is_err());
}

#[test]
fn directions_form_a_tight_frame() {
    for d in [2, 4, 8] {
        let dirs = DirectionSet::simplex(d).unwrap();
        assert_eq!(dirs.len(), d * (d + 1));
        let mut s = DMatrix::zeros(d, d);
        for t in &dirs.directions {
            assert!((t.norm() - 1.0).abs() < 1e-14);
            s += t * t.transpose();
        }
        let want = DMatrix::identity(d, d) * (d + 1) as f64;
        assert!((s - want).amax() < 1e-10);
        // antipodal pairs: odd moments vanish
        let sum: DVector<f64> = dirs.directions.iter().sum();
        assert!(sum.amax() < 1e-12);
    }
}

#[test]
fn polar_round_trip_off_the_cut() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sensor = Vector2::new(20.0, 10.0);
    for _ in 0..1000 {
        let r: f64 = rng.random_range(1e-3..50.0);
        let th: f64 = rng.random_range(-std::f64::consts::PI + 1e-3..std::f64::consts::PI - 1e-3);
        let x = sensor + Vector2::new(r * th.cos(), r * th.sin());
        let back = inverse_polar(&polar_transform(&x, &sensor), &sensor);
        assert!((back - x).amax() < 1e-12, "{x:?} -> {back:?}");
    }
}

#[test]
fn polar_jacobian_has_unit_determinant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sensor = Vector2::new(0.0, 0.0);
    let h = 1e-6;
    for _ in 0..1000 {
        let r: f64 = rng.random_range(0.05..40.0);
        let th: f64 = rng.random_range(-3.0..3.0);
        let x = Vector2::new(r * th.cos(), r * th.sin());
        let col = |e: Vector2<f64>| (polar_transform(&(x + e * h), &sensor) - polar_transform(&(x - e * h), &sensor)) / (2.0 * h);
        let fd = Matrix2::from_columns(&[col(Vector2::x()), col(Vector2::y())]);
        assert!((fd.determinant() - 1.0).abs() < 1e-6);
        assert!((fd - polar_jacobian(&x)).amax() < 1e-6);
    }
}

proptest! {
    #[test]
    fn weights_are_a_distribution(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let h = random_spd(&mut rng, d);
        let m = DVector::from_fn(d, |_, _| rng.random_range(0.0..40.0));
        // a skewed objective so the weights are not just the rule weights
        let nll = |x: &DVector<f64>| 0.5 * (x - &m).dot(&(&h * (x - &m))) + shift * (x[0] - m[0]).powi(3) / 10.0;
        let set = build_sigma_points(&m, &h, &RadialRule::new(d).unwrap(), &DirectionSet::simplex(d).unwrap(), &nll).unwrap();
        let total: f64 = set.weights.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(set.weights.iter().all(|&w| w >= 0.0));
    }
}
