mod common;

use common::primitives;

#[test]
fn every_primitive_matches_central_differences() {
    let mut failures = Vec::new();
    for (name, check) in primitives::all() {
        let err = primitives::worst_error(check);
        if !(err < 1e-4) {
            failures.push(format!("{name}: {err:e}"));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}

