mod common;

use common::*;

#[test]
fn manifold_loss_gradient_matches_finite_differences() {
    let errs = manifold_fd_errors(21);
    assert_eq!(errs.len(), FD_POINTS);
    for e in errs {
        assert!(e < FD_TOL, "relative error {e:e}");
    }
}

#[test]
fn easy_match_input_gradient_matches_finite_differences() {
    let errs = easy_match_fd_errors(22);
    assert_eq!(errs.len(), FD_POINTS);
    for e in errs {
        assert!(e < FD_TOL, "relative error {e:e}");
    }
}
