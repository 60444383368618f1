mod common;

use amptrack::metrics::{min_cost_assignment, omat};
use nalgebra::{DMatrix, Vector2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector2<f64>> {
    (0..n).map(|_| Vector2::new(rng.random_range(0.0..40.0), rng.random_range(0.0..40.0))).collect()
}

#[test]
fn assignment_equals_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 0..1000 {
        let n = 1 + k % 6;
        let est = points(&mut rng, n);
        let truth = points(&mut rng, n);
        assert_eq!(omat(&est, &truth).unwrap().value, common::brute_force_omat(&est, &truth));
    }
}

#[test]
fn unequal_sets_are_rejected() {
    let a = [Vector2::new(0.0, 0.0)];
    assert!(omat(&a, &[]).is_err());
    assert!(omat(&[], &[]).is_err());
}

proptest! {
    #[test]
    fn assignment_is_a_bijection(seed in any::<u64>(), n in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..10.0));
        let mut a = min_cost_assignment(&cost);
        a.sort();
        prop_assert_eq!(a, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn relabelling_truth_changes_nothing(seed in any::<u64>(), n in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let est = points(&mut rng, n);
        let truth = points(&mut rng, n);
        let mut shuffled = truth.clone();
        shuffled.rotate_left(n / 2);
        let a = omat(&est, &truth).unwrap().value;
        let b = omat(&est, &shuffled).unwrap().value;
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a >= 0.0);
        prop_assert_eq!(omat(&truth, &shuffled).unwrap().value, 0.0);
    }
}
