//! Reverse-mode gradients against central finite differences.

mod common;

use common::grad::{model_errors, op_cases, op_error, SEEDS, TOL};

#[test]
fn every_op_matches_finite_differences() {
    for seed in SEEDS {
        for c in op_cases(seed) {
            let err = op_error(&c, seed);
            assert!(err <= TOL, "{} seed {seed}: relative error {err:e}", c.name);
        }
    }
}

#[test]
fn full_bcat_objective_on_tiny_model() {
    for seed in SEEDS {
        for (name, err) in model_errors(seed) {
            assert!(err <= TOL, "{name} seed {seed}: relative error {err:e}");
        }
    }
}
