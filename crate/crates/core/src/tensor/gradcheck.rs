//! Finite-difference verification of backward rules.
//!
//! Every differentiable op is checked against a central difference of its
//! forward evaluation: perturb one input element by ±h, re-run the forward
//! pass, and compare the slope against the gradient produced by
//! [`Tensor::backward`]. These helpers are public so integration tests can
//! run the same checks end-to-end through the full model.

use super::{no_grad, Tensor};

/// Default perturbation for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of a scalar-valued function at `x`.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest elementwise relative error, `|analytic - numeric| / (|numeric| + 1e-12)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-12))
        .fold(0.0, f64::max)
}

/// Checks the gradient of `f` (mapping one tensor to a scalar) at `x`.
/// Panics if the max relative error exceeds `tol`; returns the error.
pub fn check_unary(f: impl Fn(&Tensor) -> Tensor, x: &[f64], shape: &[usize], tol: f64) -> f64 {
    let xt = Tensor::from_vec(x.to_vec(), shape).unwrap().with_grad();
    let loss = f(&xt);
    loss.backward().unwrap();
    let analytic = xt.grad().expect("input did not receive a gradient");
    let numeric = finite_diff(
        |xs| no_grad(|| f(&Tensor::from_vec(xs.to_vec(), shape).unwrap()).item()),
        x,
        FD_STEP,
    );
    let err = max_rel_err(&analytic, &numeric);
    assert!(err <= tol, "unary gradient check failed: max rel err {err:.3e} > tol {tol:.1e}");
    err
}

/// Checks the gradients of `f` (mapping two tensors to a scalar) with
/// respect to both inputs. Panics past `tol`; returns the worse error.
pub fn check_binary(
    f: impl Fn(&Tensor, &Tensor) -> Tensor,
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    tol: f64,
) -> f64 {
    let at = Tensor::from_vec(a.to_vec(), a_shape).unwrap().with_grad();
    let bt = Tensor::from_vec(b.to_vec(), b_shape).unwrap().with_grad();
    let loss = f(&at, &bt);
    loss.backward().unwrap();
    let ga = at.grad().expect("left input did not receive a gradient");
    let gb = bt.grad().expect("right input did not receive a gradient");
    let bt_fixed = bt.detach();
    let na = finite_diff(
        |xs| no_grad(|| f(&Tensor::from_vec(xs.to_vec(), a_shape).unwrap(), &bt_fixed).item()),
        a,
        FD_STEP,
    );
    let at_fixed = at.detach();
    let nb = finite_diff(
        |xs| no_grad(|| f(&at_fixed, &Tensor::from_vec(xs.to_vec(), b_shape).unwrap()).item()),
        b,
        FD_STEP,
    );
    let err = max_rel_err(&ga, &na).max(max_rel_err(&gb, &nb));
    assert!(err <= tol, "binary gradient check failed: max rel err {err:.3e} > tol {tol:.1e}");
    err
}
