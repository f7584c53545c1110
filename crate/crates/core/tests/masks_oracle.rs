mod support;

use beagle::masks::{inverse_block_mask, simulation_mask, simulation_mask_step, strict_causal_mask, window_plan};
use proptest::prelude::*;

#[test]
fn exhaustive_oracle_equivalence() {
    let checked = support::masks::exhaustive(32, 8).unwrap();
    assert!(checked > 0);
}

#[test]
fn window_of_one_is_causal() {
    for t in 1..=32 {
        assert_eq!(inverse_block_mask(&window_plan(t, 1, 0).unwrap()), strict_causal_mask(t));
    }
}

#[test]
fn full_unroll_is_causal_inside_each_window() {
    for t in 1..=20 {
        for k in 1..=6 {
            for eps in 0..k {
                let plan = window_plan(t, k, eps).unwrap();
                let mut m = simulation_mask(&plan);
                for step in 2..=k {
                    simulation_mask_step(&mut m, &plan, step).unwrap();
                }
                for w in &plan.windows {
                    for i in w.positions() {
                        for j in w.positions() {
                            assert_eq!(m.slot_allowed(i, j), j < i);
                        }
                    }
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn every_step_is_strictly_causal(t in 1usize..48, k in 1usize..9, eps_seed in 0usize..8, steps in 1usize..9) {
        let eps = eps_seed % k;
        let plan = window_plan(t, k, eps).unwrap();
        let mut m = simulation_mask(&plan);
        for step in 2..=steps.min(k) {
            simulation_mask_step(&mut m, &plan, step).unwrap();
        }
        for i in 1..=t {
            for j in 1..=t {
                prop_assert!(!m.allowed(i, j) || j < i);
                prop_assert!(!m.slot_allowed(i, j) || j < i);
            }
        }
    }

    #[test]
    fn windows_tile_the_sequence(t in 0usize..200, k in 1usize..12, eps_seed in 0usize..12) {
        let eps = eps_seed % k;
        let plan = window_plan(t, k, eps).unwrap();
        let covered: Vec<usize> = plan.windows.iter().flat_map(|w| w.positions()).collect();
        prop_assert_eq!(covered, (1..=t).collect::<Vec<_>>());
        let n = plan.windows.len();
        for (idx, w) in plan.windows.iter().enumerate() {
            if idx > 0 && idx + 1 < n {
                prop_assert_eq!(w.len(), k);
            }
        }
    }
}

#[test]
fn step_out_of_range_rejected() {
    let plan = window_plan(8, 3, 0).unwrap();
    let mut m = simulation_mask(&plan);
    assert!(simulation_mask_step(&mut m, &plan, 1).is_err());
    assert!(simulation_mask_step(&mut m, &plan, 4).is_err());
    assert!(window_plan(8, 3, 3).is_err());
}
