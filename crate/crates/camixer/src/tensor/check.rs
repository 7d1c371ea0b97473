//! Test-only finite-difference gradient checker.

use super::{Result, Tensor};

/// Compare analytic gradients of `f` at `params` against central finite
/// differences in f64. `f` must build a fresh graph from the given leaves on
/// every call. Panics with a diagnostic on the first mismatch.
pub fn check_grads(params: &[Tensor<f64>], f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>) {
    check_grads_tol(params, f, 1e-5, 1e-4);
}

pub fn check_grads_tol(
    params: &[Tensor<f64>],
    f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    h: f64,
    tol: f64,
) {
    for p in params {
        p.zero_grad();
    }
    let loss = f(params).expect("forward pass");
    loss.backward().expect("backward pass");
    for (pi, p) in params.iter().enumerate() {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let base = p.to_vec();
        for i in 0..p.numel() {
            let mut plus = base.clone();
            plus[i] += h;
            p.set_data(plus).unwrap();
            let fp = f(params).expect("forward (+h)").item();
            let mut minus = base.clone();
            minus[i] -= h;
            p.set_data(minus).unwrap();
            let fm = f(params).expect("forward (-h)").item();
            p.set_data(base.clone()).unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
            let rel = (analytic[i] - numeric).abs() / denom;
            assert!(
                rel <= tol,
                "gradient mismatch: param {pi} elem {i}: analytic {} vs numeric {} (rel {rel:.3e})",
                analytic[i],
                numeric
            );
        }
    }
}
