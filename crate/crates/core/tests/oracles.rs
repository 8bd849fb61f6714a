mod common;

use common::*;

fn check(r: OracleResult) {
    assert_eq!(r.instances, INSTANCES);
    assert!(r.ok(), "{}: max error {:e} over {} instances", r.family, r.max_error, r.instances);
}

#[test]
fn density_matches_brute_force() {
    check(density_oracle(11));
}

#[test]
fn local_risk_matches_brute_force() {
    check(local_risk_oracle(12));
}

#[test]
fn binning_matches_brute_force() {
    check(binning_oracle(13));
}

#[test]
fn pairwise_matrices_match_brute_force() {
    check(pairwise_oracle(14));
}

#[test]
fn watermark_metrics_match_popcount() {
    check(watermark_metric_oracle(15));
}

#[test]
fn psnr_matches_closed_form() {
    check(psnr_oracle(16));
}

#[test]
fn distortion_matches_mse() {
    check(distortion_oracle(17));
}

#[test]
fn volume_oracle_closed_forms() {
    let pi = std::f64::consts::PI;
    assert_eq!(volume_oracle(1, 2.0), 4.0);
    assert!((volume_oracle(2, 1.0) - pi).abs() < 1e-15);
    assert!((volume_oracle(3, 1.0) - 4.0 * pi / 3.0).abs() < 1e-15);
    assert!((volume_oracle(4, 1.0) - pi * pi / 2.0).abs() < 1e-15);
}
