mod common;

use amptrack::nll::{combined_nll, measurement_nll, CombinedObjective, Objective};
use common::{fd_gradient, fd_hessian, random_problem, relative_error};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn combined_nll_matches_finite_differences() {
    let grid = common::grid();
    let mm = common::model(0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let targets = 4;
        let p = random_problem(&mut rng, targets, &grid, &mm);
        let value = |x: &DVector<f64>| combined_nll(x, &p.frame, &grid, &mm, &p.prior).value;
        let grad = |x: &DVector<f64>| combined_nll(x, &p.frame, &grid, &mm, &p.prior).grad;
        let report = combined_nll(&p.x, &p.frame, &grid, &mm, &p.prior);
        let g = fd_gradient(&value, &p.x, 1e-5);
        let h = fd_hessian(&grad, &p.x, 1e-5);
        assert!(relative_error(g.as_slice(), report.grad.as_slice()) < 1e-5);
        assert!(relative_error(h.as_slice(), report.hess.as_slice()) < 1e-4);
    }
}

#[test]
fn objective_reports_the_combined_nll() {
    let grid = common::grid();
    let mm = common::model(0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random_problem(&mut rng, 3, &grid, &mm);
    let obj = CombinedObjective::new(&grid, &mm, &p.frame, Some(&p.prior), 3);
    let direct = combined_nll(&p.x, &p.frame, &grid, &mm, &p.prior);
    let report = obj.report(&p.x);
    assert_eq!(obj.dim(), 6);
    assert!((report.value - direct.value).abs() <= 1e-12 * direct.value.abs());
    assert!((obj.value(&p.x) - direct.value).abs() <= 1e-12 * direct.value.abs());
    assert!((&report.grad - &direct.grad).amax() <= 1e-12 * direct.grad.amax());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn measurement_gradient_matches_differences(seed in any::<u64>(), targets in 1usize..=4) {
        let grid = common::grid();
        let mm = common::model(0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_problem(&mut rng, targets, &grid, &mm);
        let value = |x: &DVector<f64>| measurement_nll(x, &p.frame, &grid, &mm).value;
        let report = measurement_nll(&p.x, &p.frame, &grid, &mm);
        let g = fd_gradient(&value, &p.x, 1e-5);
        prop_assert!(relative_error(g.as_slice(), report.grad.as_slice()) < 1e-5);
    }

    #[test]
    fn nll_is_nonnegative_and_symmetric(seed in any::<u64>()) {
        let grid = common::grid();
        let mm = common::model(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_problem(&mut rng, 2, &grid, &mm);
        let r = combined_nll(&p.x, &p.frame, &grid, &mm, &p.prior);
        prop_assert!(r.value >= 0.0);
        prop_assert_eq!(&r.hess, &r.hess.transpose());
    }
}
