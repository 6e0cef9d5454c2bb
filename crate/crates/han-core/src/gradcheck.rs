//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward pass, so it stays independent
//! of the backward implementations it is used to verify. Losses must be
//! rebuilt from the current parameter values on every call.

use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Numeric gradient of `loss` with respect to `param` by central differences.
/// `loss` must rebuild the computation from the tensor's current data.
pub fn fd_gradient(mut loss: impl FnMut() -> f64, param: &Tensor, step: f64) -> Vec<f64> {
    let n = param.numel();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let original = param.data()[i];
        param.data_mut()[i] = original + step;
        let plus = loss();
        param.data_mut()[i] = original - step;
        let minus = loss();
        param.data_mut()[i] = original;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

#[derive(Debug)]
pub struct GradReport {
    pub max_err: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradReport {
    pub fn within(&self, tol: f64) -> bool {
        self.max_err <= tol
    }
}

/// Compare backward() gradients with central finite differences for every
/// listed parameter. Error metric: |a - n| / max(1, |a|, |n|).
pub fn compare(build: impl Fn() -> Tensor, params: &[Tensor], step: f64) -> GradReport {
    for p in params {
        p.zero_grad();
    }
    let loss = build();
    loss.backward();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    for p in params {
        p.zero_grad();
    }

    let mut report =
        GradReport { max_err: 0.0, worst_param: 0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    for (pi, p) in params.iter().enumerate() {
        let numeric = fd_gradient(|| build().value(), p, step);
        for (i, (&a, &nv)) in analytic[pi].iter().zip(&numeric).enumerate() {
            let err = (a - nv).abs() / 1.0f64.max(a.abs()).max(nv.abs());
            if err > report.max_err {
                report =
                    GradReport { max_err: err, worst_param: pi, worst_index: i, analytic: a, numeric: nv };
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        let x = Tensor::param(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        // f = sum(x * x); df/dx = 2x
        let report = compare(|| x.mul(&x).unwrap().sum_all(), &[x.clone()], DEFAULT_STEP);
        assert!(report.within(1e-8), "{report:?}");
        x.zero_grad();
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![1.0, -2.0, 4.0]);
    }
}
