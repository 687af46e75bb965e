mod common;

use common::{composite_check, op_checks, straight_through_is_identity, REL_TOL};

#[test]
fn every_op_matches_central_differences() {
    let reports = op_checks();
    let mut total = 0;
    for (name, report) in &reports {
        total += report.checked();
        let worst = report.worst().unwrap();
        assert!(
            report.max_rel_error() < REL_TOL,
            "{name}: worst coordinate {worst:?}"
        );
    }
    assert!(total >= 200, "only {total} coordinates checked");
}

#[test]
fn straight_through_backward_is_identity() {
    assert!(straight_through_is_identity());
}

#[test]
fn full_model_loss_matches_central_differences() {
    let report = composite_check(16);
    assert!(
        report.checked() >= 200,
        "only {} coordinates",
        report.checked()
    );
    assert!(
        report.max_rel_error() < REL_TOL,
        "worst coordinate {:?}",
        report.worst()
    );
}
