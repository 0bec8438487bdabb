mod common;

use common::gradcheck::{self, TOLERANCE};

fn check(results: Vec<(String, f64)>) {
    for (name, err) in &results {
        assert!(*err < TOLERANCE, "{name}: relative error {err:e}");
    }
}

#[test]
fn gdn_matches_finite_differences() {
    check(gradcheck::gdn());
}

#[test]
fn igdn_matches_finite_differences() {
    check(gradcheck::igdn());
}

#[test]
fn conv_matches_finite_differences() {
    check(gradcheck::conv());
}

#[test]
fn conv_transpose_matches_finite_differences() {
    check(gradcheck::conv_transpose());
}

#[test]
fn distortion_terms_match_finite_differences() {
    check(gradcheck::distortion());
}

#[test]
fn rate_matches_finite_differences() {
    check(gradcheck::rate());
}

#[test]
fn transform_chain_matches_finite_differences() {
    check(gradcheck::transforms());
}
