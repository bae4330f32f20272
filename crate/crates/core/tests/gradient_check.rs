use organseg::gradcheck::{run_grad_check, GradCheckConfig, Precision};

#[test]
fn double_precision_gradients_match_finite_differences() {
    let report = run_grad_check(&GradCheckConfig::default(), Precision::F64, false).unwrap();
    println!("{report}");
    assert!(report.passed(), "{report}");
    assert!(report.max_error() < 1e-3);
}

#[test]
fn single_precision_gradients_hold_their_threshold() {
    let r32 = run_grad_check(&GradCheckConfig::default(), Precision::F32, false).unwrap();
    let r64 = run_grad_check(&GradCheckConfig::default(), Precision::F64, false).unwrap();
    println!("{r32}");
    assert!(r32.passed(), "{r32}");
    assert_ne!(r32.max_error(), r64.max_error());
}

#[test]
fn sign_flipped_loss_gradient_is_caught_and_named() {
    let report = run_grad_check(&GradCheckConfig::default(), Precision::F64, true).unwrap();
    assert!(!report.passed());
    let text = report.to_string();
    assert!(text.contains("FAILED: tal_loss"), "{text}");
}
