mod common;

use amptrack::consistency::{chi2_threshold, ConsistencyGate};
use amptrack::model::{simulate, NoiseVariance, ScenarioConfig};
use proptest::prelude::*;

#[test]
fn threshold_matches_numerical_cdf() {
    for (dof, p) in [(25, 0.0013), (25, 0.05), (9, 0.0013), (16, 0.5), (1, 0.01)] {
        let q = chi2_threshold(dof, p).unwrap();
        let oracle = common::chi2_quantile(dof, p);
        assert!((q - oracle).abs() < 1e-4 * oracle, "dof {dof} p {p}: {q} vs {oracle}");
    }
}

#[test]
fn oracle_density_integrates_to_one() {
    assert!((common::chi2_upper_tail(25, 0.0) - 1.0).abs() < 1e-9);
}

#[test]
fn rejection_rate_at_truth() {
    let sc = ScenarioConfig { sigma_s2: NoiseVariance::Shared(0.1), ..Default::default() }.build().unwrap();
    let gate = ConsistencyGate::new(sc.grid.len(), 0.0013).unwrap();
    let n = 10_000;
    let mut rejected = 0;
    for seed in 0..n {
        let traj = simulate(&sc, 1, seed).unwrap();
        let x = traj.states[0].positions();
        if !gate.check(&x, &traj.frames[0], &sc.grid, &sc.measurement).consistent {
            rejected += 1;
        }
    }
    let p = 0.0013;
    let sd = (p * (1.0 - p) / n as f64).sqrt();
    let rate = rejected as f64 / n as f64;
    assert!((rate - p).abs() <= 3.0 * sd, "rate {rate}");
}

proptest! {
    #[test]
    fn threshold_is_the_upper_tail(dof in 1usize..60, p in 0.001f64..0.5) {
        let q = chi2_threshold(dof, p).unwrap();
        let tail = statrs::function::gamma::gamma_ur(0.5 * dof as f64, 0.5 * q);
        prop_assert!((tail - p).abs() < 1e-9 * p.max(1e-3));
    }

    #[test]
    fn threshold_decreases_with_p(dof in 1usize..60, p in 0.001f64..0.4) {
        prop_assert!(chi2_threshold(dof, p).unwrap() > chi2_threshold(dof, p + 0.05).unwrap());
    }
}
