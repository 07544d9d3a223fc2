use approx::assert_relative_eq;
use proptest::prelude::*;

use feynkac::colehopf::{burgers_drift, hj_drift, DriftMode, MODE_OFFSET};
use feynkac::dnls::{self, delta, HierarchyLevel, LatticeState};
use feynkac::paths::{BrownianPath, FourierBridge, SheetSample, TimeGrid};
use feynkac::stats::{jackknife_ratio, pairwise_sum};

fn lattice(min: usize, max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, min..max)
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(64) })]

    #[test]
    fn pairwise_sum_agrees_with_naive(xs in prop::collection::vec(-1e3f64..1e3, 0..500)) {
        let naive: f64 = xs.iter().sum();
        prop_assert!((pairwise_sum(&xs) - naive).abs() <= 1e-9 * (1.0 + xs.iter().map(|v| v.abs()).sum::<f64>()));
    }

    #[test]
    fn jackknife_of_proportional_samples_is_exact(den in prop::collection::vec(0.5f64..2.0, 3..50), c in -3.0f64..3.0) {
        let num: Vec<f64> = den.iter().map(|d| c * d).collect();
        let (r, se) = jackknife_ratio(&num, &den).unwrap();
        assert_relative_eq!(r, c, epsilon = 1e-12);
        prop_assert!(se.abs() < 1e-10);
    }

    #[test]
    fn bridges_hit_their_endpoint(end in -3.0f64..3.0, t in 0.1f64..4.0, seed in 0u64..1000) {
        let b = FourierBridge::pinned(&[end], t, 64, seed, 0).unwrap();
        prop_assert!((b.eval(t).unwrap()[0] - end).abs() < 1e-12);
        prop_assert_eq!(b.eval(0.0).unwrap()[0], 0.0);
    }

    #[test]
    fn coarsened_paths_keep_their_endpoint(seed in 0u64..1000, factor in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let grid = TimeGrid::uniform(1.0, 64).unwrap();
        let p = BrownianPath::sample(2, grid, seed).unwrap();
        let c = p.coarsen(factor).unwrap();
        for (a, b) in p.values_at(64).unwrap().iter().zip(c.values_at(64 / factor).unwrap()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sheet_starts_at_zero_and_is_periodic(seed in 0u64..1000, x in -1.0f64..1.0) {
        let grid = TimeGrid::uniform(0.5, 8).unwrap();
        let s = SheetSample::sample(1.0, 16, grid, seed, 0).unwrap();
        prop_assert_eq!(s.eval(x, 0).unwrap(), 0.0);
        prop_assert!((s.eval(x, 8).unwrap() - s.eval(x + 2.0, 8).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn lattice_differences_telescope(xs in lattice(3, 40), order in 1u8..=2) {
        let d = delta(order, &LatticeState::new(xs.clone()).unwrap()).unwrap();
        let scale: f64 = xs.iter().map(|v| v.abs()).sum::<f64>() + 1.0;
        prop_assert!(d.values().iter().sum::<f64>().abs() < 1e-12 * scale);
    }

    #[test]
    fn hj_modes_differ_by_a_constant(ys in lattice(3, 20)) {
        let y = LatticeState::new(ys).unwrap();
        let p = hj_drift(&y, DriftMode::PaperLiteral).unwrap();
        let i = hj_drift(&y, DriftMode::ItoDerived).unwrap();
        for (a, b) in p.iter().zip(&i) {
            prop_assert!((a - b - MODE_OFFSET).abs() < 1e-12);
        }
    }

    #[test]
    fn burgers_drift_conserves_the_field_sum(us in lattice(3, 20)) {
        let u = LatticeState::new(us).unwrap();
        let a = burgers_drift(&u, DriftMode::ItoDerived).unwrap();
        let b = burgers_drift(&u, DriftMode::PaperLiteral).unwrap();
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-10);
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_noise_conserves_lattice_sum(xs in prop::collection::vec(0.5f64..1.5, 4..16), k in 2u8..=3) {
        let grid = TimeGrid::uniform(0.05, 50).unwrap();
        let level = HierarchyLevel::new(k).unwrap();
        let t = dnls::direct_solve(level, &xs, &BrownianPath::zero(xs.len(), grid)).unwrap();
        let s0: f64 = xs.iter().sum();
        prop_assert!((t.terminal().iter().sum::<f64>() - s0).abs() < 1e-12 * s0);
    }

    #[test]
    fn routes_agree_on_identical_noise(seed in 0u64..200) {
        let grid = TimeGrid::uniform(0.05, 200).unwrap();
        let x0: Vec<f64> = (0..6).map(|j| 1.0 + 0.1 * j as f64).collect();
        let path = BrownianPath::sample(6, grid, seed).unwrap();
        let level = HierarchyLevel::new(2).unwrap();
        let a = dnls::direct_solve(level, &x0, &path).unwrap();
        let b = dnls::path_ordered_solve(level, &x0, &path).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 0.05);
    }
}
