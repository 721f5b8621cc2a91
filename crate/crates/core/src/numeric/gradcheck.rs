//! Central finite differences, the independent oracle for tape gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Analytic gradients of one tensor compared against finite differences.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub subject: String,
    pub seed: u64,
    pub tensor: String,
    pub rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheck {
    pub fn new(subject: &str, seed: u64, tensor: &str, rel_error: f64, tolerance: f64) -> Self {
        Self {
            subject: subject.into(),
            seed,
            tensor: tensor.into(),
            rel_error,
            tolerance,
            pass: rel_error < tolerance,
        }
    }
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Result<Tensor> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::InvalidArgument(format!("finite difference step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute difference norm when both
/// sides are below `1e-12` (so two vanishing gradients compare as equal).
pub fn relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    let diff = a.sub(b)?.frobenius_norm();
    let denom = a.frobenius_norm().max(b.frobenius_norm());
    Ok(if denom < 1e-12 { diff } else { diff / denom })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::vector(vec![0.3, -2.0, 5.0]);
        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn quadratic_form_is_exact_up_to_rounding() {
        // f(x) = 1/2 x^T Q x + c^T x, grad = Q x + c (Q symmetric)
        let q = [[2.0, 0.5, 0.0], [0.5, 1.0, -0.3], [0.0, -0.3, 3.0]];
        let c = [0.1, -0.2, 0.7];
        let f = |t: &Tensor| {
            let x = t.data();
            let mut s = 0.0;
            for i in 0..3 {
                s += c[i] * x[i];
                for j in 0..3 {
                    s += 0.5 * x[i] * q[i][j] * x[j];
                }
            }
            s
        };
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let g = finite_diff_grad(f, &x, 1e-3).unwrap();
        for i in 0..3 {
            let want: f64 = (0..3).map(|j| q[i][j] * x.data()[j]).sum::<f64>() + c[i];
            assert!((g.data()[i] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::vector(vec![1.0]);
        assert!(finite_diff_grad(|t| t.data()[0], &x, 0.0).is_err());
    }

    #[test]
    fn relative_error_of_zero_vectors_is_zero() {
        let z = Tensor::zeros(&[4]);
        assert_eq!(relative_error(&z, &z).unwrap(), 0.0);
    }
}
