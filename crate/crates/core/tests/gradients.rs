mod common;

use common::gradients::{suite, POINTS, TOLERANCE};

#[test]
fn every_primitive_and_the_mask_objective_match_finite_differences() {
    let results = suite();
    let failures: Vec<_> = results.iter().filter(|(_, err)| err.is_nan() || *err >= TOLERANCE).collect();
    assert!(
        failures.is_empty(),
        "relative error >= {TOLERANCE:e} over {POINTS} points: {failures:?}"
    );
}
