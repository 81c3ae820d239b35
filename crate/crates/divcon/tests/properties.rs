//! Randomized invariants of gradient regulation and prompt projection.

mod common;

use common::suites::{proj_suite, regulation_suite};

#[test]
fn regulation_invariants_hold_on_random_pairs() {
    let r = regulation_suite(10_000);
    assert!(r.ok(), "{r:?}");
}

#[test]
fn projection_is_orthogonal_and_idempotent() {
    let r = proj_suite(10_000);
    assert!(r.worst_orthogonality < 1e-9, "{r:?}");
    assert!(r.worst_idempotence < 1e-9, "{r:?}");
}
