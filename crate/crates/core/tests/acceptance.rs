//! Acceptance gate: one test per criterion, each printing a single
//! machine-readable verdict line with the measured margins.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see every
//! verdict; a failing criterion fails its own test with the same line.

use tracelab_core::checks::{self, CriterionResult};

fn gate(result: CriterionResult) {
    println!("{result}");
    assert!(result.pass, "{result}");
}

#[test]
fn criterion_01_bound_chain() {
    gate(checks::check_bound_chain().unwrap());
}

#[test]
fn criterion_02_evidence_gap_identity() {
    gate(checks::check_elbo_gap().unwrap());
}

#[test]
fn criterion_03_gradient_oracles() {
    gate(checks::check_gradient_oracles().unwrap());
}

#[test]
fn criterion_04_single_draw_variance() {
    gate(checks::check_single_draw_variance().unwrap());
}

#[test]
fn criterion_05_equivalence_web() {
    gate(checks::check_equivalence_web().unwrap());
}

#[test]
fn criterion_06_accuracy_bias_ladder() {
    gate(checks::check_bias_ladder().unwrap());
}

#[test]
fn criterion_07_fisher_consistency() {
    gate(checks::check_fisher_consistency().unwrap());
}

#[test]
fn criterion_08_behavior_policy_optimum() {
    gate(checks::check_behavior_optimum().unwrap());
}

#[test]
fn criterion_09_end_to_end_training_demo() {
    gate(checks::check_train_demo().unwrap());
}

#[test]
fn criterion_10_rollout_count_scaling() {
    gate(checks::check_k_scaling().unwrap());
}
