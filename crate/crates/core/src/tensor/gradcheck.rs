//! Central finite-difference oracle for gradient verification. Independent
//! of the tape: it only needs a scalar-valued function of a tensor.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference gradient estimate: per element
/// `(f(x + h·e_i) − f(x − h·e_i)) / (2h)`.
///
/// `f` must be deterministic and finite near `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("finite_diff_grad: h = {h} must be positive")));
    }
    let mut grad = vec![0.0f64; x.numel()];
    let mut probe = x.clone();
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let f_plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let f_minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_grad",
                index: i,
            });
        }
        *g = (f_plus - f_minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Gradient-check metric: max over elements of
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn cubic_polynomial_at_one() {
        // d/dx 2x^3 = 6x^2 -> 6 at x = 1
        let x = Tensor::scalar(1.0);
        let g = finite_diff_grad(|t| Ok(2.0 * t.data()[0].powi(3)), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_grad(|t| Ok(t.data()[0]), &x, 0.0).is_err());
    }

    #[test]
    fn non_finite_evaluation_names_offending_index() {
        // finite at the base point, NaN only when element 1 dips negative
        let x = Tensor::from_f64s(&[2], &[1.0, 0.0]).unwrap();
        let err = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[1].sqrt()), &x, 1e-5)
            .unwrap_err();
        match err {
            Error::NonFinite { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn matches_tape_gradient_for_composite() {
        let x = Tensor::from_f64s(&[3], &[0.3, -0.7, 1.2]).unwrap().with_grad();
        let run = |t: &Tensor<f64>| -> crate::error::Result<f64> {
            let mut tape: Tape = Tape::new();
            let v = tape.leaf(t);
            let th = tape.tanh(v)?;
            let sq = tape.mul(th, th)?;
            let s = tape.sum_all(sq)?;
            Ok(tape.item(s)?)
        };
        let mut tape: Tape = Tape::new();
        let v = tape.leaf(&x);
        let th = tape.tanh(v).unwrap();
        let sq = tape.mul(th, th).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        let analytic = tape.grad(v).unwrap().to_vec();
        let numeric = finite_diff_grad(run, &x, 1e-5).unwrap();
        assert!(max_rel_err(&analytic, numeric.data()) < 1e-6);
    }
}
