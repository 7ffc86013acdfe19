use overfill_core::gradcheck::{end_to_end_error, op_errors};

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..3 {
        for (name, err) in op_errors(seed).unwrap() {
            assert!(err < 1e-4, "{name}: relative error {err:e} (seed {seed})");
        }
    }
}

#[test]
fn split_loss_gradient_matches_finite_differences() {
    let err = end_to_end_error(7).unwrap();
    assert!(err < 1e-3, "relative error {err:e}");
}
