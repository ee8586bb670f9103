mod suites;

use suites::structural;

#[test]
fn residual_bound_holds_on_random_probes() {
    structural::residual_bound_holds_on_random_probes();
}

#[test]
fn identity_metric_reduces_force_to_flow_matching() {
    structural::identity_metric_reduces_force_to_flow_matching();
}

#[test]
fn metric_is_positive_normalised_and_bounded() {
    structural::metric_is_positive_normalised_and_bounded();
}

#[test]
fn zero_step_integration_is_identity() {
    structural::zero_step_integration_is_identity();
}

#[test]
fn stage2_leaves_frozen_weights_unchanged() {
    structural::stage2_leaves_frozen_weights_unchanged();
}
