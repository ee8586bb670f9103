mod suites;

use suites::alignment;

#[test]
fn sinkhorn_matches_permutation_oracle_on_three_points() {
    alignment::sinkhorn_matches_permutation_oracle_on_three_points();
}

#[test]
fn sinkhorn_single_points_cost_the_squared_offset() {
    alignment::sinkhorn_single_points_cost_the_squared_offset();
}

#[test]
fn sliced_wasserstein_fixtures() {
    alignment::sliced_wasserstein_fixtures();
}

#[test]
fn sliced_wasserstein_gaussian_offset() {
    alignment::sliced_wasserstein_gaussian_offset();
}

#[test]
fn costs_are_symmetric_and_translation_invariant() {
    alignment::costs_are_symmetric_and_translation_invariant();
}

#[test]
fn gradient_through_sinkhorn() {
    alignment::gradient_through_sinkhorn();
}

#[test]
fn gradient_through_sliced() {
    alignment::gradient_through_sliced();
}
