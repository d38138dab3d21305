//! Minimal dense-tensor math layer: f64 tensors, a counter-based RNG,
//! numerically stable softmax, bilinear grid sampling, and the
//! central-difference gradient checker the attention tests are built on.

pub mod gradcheck;
pub mod rng;
pub mod sample;
pub mod tensor;

pub use gradcheck::grad_check;
pub use rng::RngState;
pub use sample::{bilinear_sample, bilinear_tap, sample_backward_with_tap, sample_with_tap, BilinearTap};
pub use tensor::{dot, matvec, matvec_backward, Tensor};

use crate::error::{Error, Result};

/// Max-shifted softmax; outputs sum to 1.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::domain("softmax of empty vector".to_string()));
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::domain(format!("softmax input contains {bad}")));
    }
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(out)
}

/// In-place softmax over a scratch slice, for hot loops.
pub fn softmax_inplace(x: &mut [f64]) {
    debug_assert!(!x.is_empty());
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Backward of softmax: dx_i = y_i (dy_i − Σ_j y_j dy_j).
pub fn softmax_backward(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    debug_assert_eq!(y.len(), dy.len());
    let inner: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    for i in 0..y.len() {
        dx[i] = y[i] * (dy[i] - inner);
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_inputs_is_uniform() {
        let y = softmax(&[0.0, 0.0]).unwrap();
        assert!((y[0] - 0.5).abs() < 1e-15);
        assert!((y[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_inputs_do_not_overflow() {
        let y = softmax(&[1000.0, 1000.0]).unwrap();
        assert!((y[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_closed_form() {
        // softmax([0, ln 3]) = [1/4, 3/4]
        let y = softmax(&[0.0, 3.0f64.ln()]).unwrap();
        assert!((y[0] - 0.25).abs() < 1e-12);
        assert!((y[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let y = softmax(&[0.3, -2.0, 5.5, 1.1]).unwrap();
        let s: f64 = y.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let a = softmax(&[0.2, 1.7, -0.4]).unwrap();
        let b = softmax(&[100.2, 101.7, 99.6]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn softmax_backward_matches_fd() {
        let x = [0.4, -1.1, 2.0];
        let dy = [1.0, -2.0, 0.5];
        let y = softmax(&x).unwrap();
        let mut dx = [0.0; 3];
        softmax_backward(&y, &dy, &mut dx);
        let eps = 1e-6;
        for i in 0..3 {
            let mut xp = x;
            xp[i] += eps;
            let mut xm = x;
            xm[i] -= eps;
            let f = |v: &[f64; 3]| -> f64 {
                let s = softmax(v).unwrap();
                s.iter().zip(&dy).map(|(a, b)| a * b).sum()
            };
            let fd = (f(&xp) - f(&xm)) / (2.0 * eps);
            assert!((dx[i] - fd).abs() < 1e-8, "coord {i}: {} vs {}", dx[i], fd);
        }
    }
}
