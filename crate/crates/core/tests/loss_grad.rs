mod suites;

use suites::gradients;

#[test]
fn autoencoder_loss() {
    gradients::autoencoder_loss();
}

#[test]
fn draftprior_loss() {
    gradients::draftprior_loss();
}

#[test]
fn flow_matching_loss() {
    gradients::flow_matching_loss();
}

#[test]
fn force_matching_and_metric_losses() {
    gradients::force_matching_and_metric_losses();
}

#[test]
fn fused_loss_never_reaches_the_decoder() {
    gradients::fused_loss_never_reaches_the_decoder();
}

#[test]
fn residual_refiner_loss() {
    gradients::residual_refiner_loss();
}

#[test]
fn ot_regularized_loss_through_sinkhorn() {
    gradients::ot_regularized_loss_through_sinkhorn();
}
