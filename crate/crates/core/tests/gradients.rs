mod common;

use common::grad_cases::{run, CASES};

const SEEDS: u64 = 100;
const TOL: f64 = 1e-4;

#[test]
fn every_differentiable_op_matches_finite_differences() {
    let mut failures = Vec::new();
    for name in CASES {
        let worst = (0..SEEDS).map(|s| run(name, s).max_rel).fold(0.0, f64::max);
        if !(worst <= TOL) {
            failures.push(format!("{name}: max relative error {worst:.3e}"));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}
