mod common;

#[test]
fn analytic_gradients_match_central_differences() {
    let worst = common::worst_gradient_error(20, 2024);
    assert!(worst < 1e-5, "relative error {worst:e}");
}
