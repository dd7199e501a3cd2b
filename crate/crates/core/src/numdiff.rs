//! Central finite differences, the independent oracle the gradient tests
//! check the tape against.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Central-difference gradient of a scalar-valued function:
/// `(f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)` per coordinate.
pub fn finite_difference<F>(f: &F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("finite_difference: eps {eps} <= 0")));
    }
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.detached();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval_scalar(f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval_scalar(f, &probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let out = f(x)?;
    if !out.is_scalar() {
        return Err(Error::InvalidArgument(format!(
            "finite_difference: function returned shape {:?}, expected scalar",
            out.shape()
        )));
    }
    Ok(out.item())
}

/// Largest relative error between two slices, with an absolute floor so that
/// near-zero entries compare absolutely.
pub fn max_rel_err(actual: &[f64], expected: &[f64], atol: f64) -> f64 {
    assert_eq!(actual.len(), expected.len());
    actual
        .iter()
        .zip(expected)
        .map(|(&a, &e)| {
            let diff = (a - e).abs();
            if diff <= atol {
                0.0
            } else {
                diff / a.abs().max(e.abs()).max(atol)
            }
        })
        .fold(0.0, f64::max)
}

/// Assert `|a - e| <= atol + rtol * |e|` elementwise, reporting the first
/// offending index.
pub fn assert_close(actual: &[f64], expected: &[f64], rtol: f64, atol: f64) {
    assert_eq!(actual.len(), expected.len(), "length mismatch");
    for (i, (&a, &e)) in actual.iter().zip(expected).enumerate() {
        let tol = atol + rtol * e.abs();
        assert!(
            (a - e).abs() <= tol,
            "index {i}: actual {a} vs expected {e} (diff {}, tol {tol})",
            (a - e).abs()
        );
    }
}
