mod common;

use common::*;

#[test]
fn pixel_accounting() {
    assert_all(&pixel_accounting_suite());
}

#[test]
fn gradients_match_finite_differences() {
    assert_all(&gradient_suite());
}

#[test]
fn online_contract() {
    assert_all(&causality_suite());
}

#[test]
fn gradient_routing() {
    assert_all(&routing_suite());
}

#[test]
fn loss_oracles() {
    assert_all(&loss_oracle_suite());
}
