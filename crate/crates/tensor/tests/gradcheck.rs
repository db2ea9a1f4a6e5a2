use nsp_tensor::gradcheck::{op_suite, CASES, TOLERANCE};

#[test]
fn every_operation_matches_finite_differences() {
    let results = op_suite();
    assert!(results.len() >= 20);
    for r in &results {
        assert_eq!(r.cases, CASES);
        assert!(
            r.worst < TOLERANCE,
            "{}: worst relative error {:.3e}",
            r.name,
            r.worst
        );
    }
}

#[test]
fn relative_error_is_scale_free() {
    use nsp_tensor::gradcheck::relative_error;
    assert_eq!(relative_error(&[1.0, -2.0], &[1.0, -2.0]), 0.0);
    assert!((relative_error(&[1.0, 0.0], &[-1.0, 0.0]) - 2.0).abs() < 1e-12);
    let small = relative_error(&[1e-3, 2e-3], &[1.0001e-3, 2e-3]);
    let large = relative_error(&[1e3, 2e3], &[1.0001e3, 2e3]);
    assert!((small - large).abs() < 1e-6);
}

#[test]
fn central_differences_of_a_cubic() {
    use nsp_tensor::gradcheck::central_differences;
    let f = |v: &[Vec<f64>]| v[0][0].powi(3) + 2.0 * v[0][1];
    let d = central_differences(f, &[vec![2.0, 5.0]], &[(0, 0), (0, 1)], 1e-3);
    assert!((d[0] - 12.0).abs() < 1e-5);
    assert!((d[1] - 2.0).abs() < 1e-9);
}
