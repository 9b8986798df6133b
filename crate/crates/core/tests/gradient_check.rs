#[path = "support/gradients.rs"]
mod gradients;

use gradients::{Outcome, TOL};

fn assert_within(outcomes: Vec<Outcome>) {
    assert!(!outcomes.is_empty());
    for (name, err) in outcomes {
        assert!(err < TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn conv_gradients() {
    assert_within(gradients::conv());
}

#[test]
fn conv_transpose_gradients() {
    assert_within(gradients::conv_transpose());
}

#[test]
fn batchnorm_gradients_in_both_modes() {
    assert_within(gradients::batchnorm());
}

#[test]
fn fully_connected_gradients() {
    assert_within(gradients::fully_connected());
}

#[test]
fn elementwise_and_pooling_gradients() {
    assert_within(gradients::elementwise_and_pooling());
}

#[test]
fn softmax_cross_entropy_gradients() {
    assert_within(gradients::cross_entropy());
}

#[test]
fn rate_term_gradients() {
    assert_within(gradients::rate_term());
}

#[test]
fn three_layer_network_gradients() {
    assert_within(gradients::small_network());
}

#[test]
fn full_objective_sampled_gradients() {
    assert_within(gradients::full_objective());
}

#[test]
fn case_names_are_unique() {
    let mut names: Vec<String> = gradients::all().into_iter().map(|o| o.0).collect();
    let n = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), n);
}
