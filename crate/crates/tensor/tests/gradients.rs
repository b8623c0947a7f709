use nav_tensor::{gradient_check, layer_suite, GradCheckOptions, Tape, Tensor, Var};

#[test]
fn every_layer_kind_matches_finite_differences() {
    let cases = layer_suite(&GradCheckOptions::default()).unwrap();
    assert!(cases.len() >= 12);
    for c in &cases {
        eprintln!("{:<36} max rel err {:.3e}", c.name, c.report.max_rel_error);
    }
    for c in &cases {
        assert!(c.report.passed, "{}: {:?}", c.name, c.report);
    }
}

#[test]
fn suite_is_deterministic() {
    let a = layer_suite(&GradCheckOptions::default()).unwrap();
    let b = layer_suite(&GradCheckOptions::default()).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.report.max_rel_error.to_bits(), y.report.max_rel_error.to_bits(), "{}", x.name);
    }
}

#[test]
fn steps_across_a_relu_kink_are_detected() {
    let x = Tensor::new(vec![5], vec![4e-4, 7e-4, 0.5, -0.3, -2e-3]).unwrap();
    let f = |t: &mut Tape, v: &[Var]| {
        let r = t.relu(v[0])?;
        t.sum(r)
    };
    let report = gradient_check(f, &[x], &GradCheckOptions::default()).unwrap();
    let p = &report.params[0];
    assert!(report.passed, "{report:?}");
    assert_eq!(p.checked, 5);
    assert_eq!(p.kinked, 2);
    assert_eq!(p.skipped, 0);
}
