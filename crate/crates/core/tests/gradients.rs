//! Finite-difference gradient checks: every differentiable op standalone at
//! 1e-6, and the two full-model losses at 1e-4 over sampled parameters.

mod support;

use depthbench_core::rng::DetRng;
use depthbench_core::tensor::grad_check;
use support::{mono_model_gradient_error, stereo_model_gradient_errors, MODEL_TOL};

#[test]
fn every_op_passes_grad_check_at_its_tolerance() {
    for e in support::gradient_suite() {
        assert!(e.error < e.tol, "{}: max relative error {} (tol {})", e.name, e.error, e.tol);
    }
}

#[test]
fn full_mono_loss_passes_sampled_grad_check() {
    let err = mono_model_gradient_error();
    assert!(err < MODEL_TOL, "mono loss gradient error {err}");
}

#[test]
fn full_stereo_loss_passes_sampled_grad_check() {
    let (err1, err4) = stereo_model_gradient_errors();
    assert!(err1 < MODEL_TOL, "stereo stage-1 loss gradient error {err1}");
    assert!(err4 < MODEL_TOL, "stereo full loss gradient error {err4}");
}

#[test]
fn grad_check_of_mean_is_tight() {
    let mut rng = DetRng::seed_from_u64(207);
    let x = support::random_tensor(&mut rng, vec![7], -1.0, 1.0);
    let err = grad_check(|t, ids| t.mean(ids[0]), &[x], 1e-5).unwrap();
    assert!(err < 1e-10, "mean gradient error {err}");
}
