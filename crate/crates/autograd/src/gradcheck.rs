//! Central finite-difference gradient checking.

use crate::error::{AutogradError, Result};
use crate::tensor::Tensor;

/// Relative error convention used throughout: `|a - n| / max(1, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Central difference of `f` at coordinate `i` of `x`.
pub fn central_difference<F>(f: &mut F, x: &Tensor, i: usize, step: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut xp = x.clone();
    xp.data_mut()[i] += step;
    let fp = f(&xp)?;
    if !fp.is_finite() {
        return Err(AutogradError::NonFinite { index: i, value: fp });
    }
    let mut xm = x.clone();
    xm.data_mut()[i] -= step;
    let fm = f(&xm)?;
    if !fm.is_finite() {
        return Err(AutogradError::NonFinite { index: i, value: fm });
    }
    Ok((fp - fm) / (2.0 * step))
}

/// Max relative error between `analytic` and central differences of `f`
/// over every coordinate of `x`.
pub fn grad_check<F>(mut f: F, x: &Tensor, analytic: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if analytic.shape() != x.shape() {
        return Err(AutogradError::ShapeMismatch {
            op: "grad_check",
            lhs: x.shape().to_vec(),
            rhs: analytic.shape().to_vec(),
        });
    }
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let numeric = central_difference(&mut f, x, i, step)?;
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// [`grad_check`] where the analytic gradient comes from the tape: `build`
/// records the function on a fresh tape given the leaf for `x` and returns
/// the scalar output.
pub fn grad_check_taped<B>(mut build: B, x: &Tensor, step: f64) -> Result<f64>
where
    B: FnMut(&mut crate::Tape, crate::Var) -> Result<crate::Var>,
{
    let mut tape = crate::Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = build(&mut tape, leaf)?;
    let value = tape.value(out).item();
    if !value.is_finite() {
        return Err(AutogradError::NonFinite { index: 0, value });
    }
    tape.backward(out)?;
    let analytic = tape.grad_or_zeros(leaf);
    grad_check(
        |xv| {
            let mut t = crate::Tape::new();
            let l = t.leaf(xv.clone());
            let o = build(&mut t, l)?;
            Ok(t.value(o).item())
        },
        x,
        &analytic,
        step,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::matrix(1, 4, vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let err = grad_check_taped(
            |t: &mut Tape, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn sigmoid_of_sum_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(1, 3));
        let s = t.sum(x);
        let y = t.sigmoid(s);
        t.backward(y).unwrap();
        for &g in t.grad(x).unwrap().data() {
            assert!((g - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_reports_coordinate() {
        let x = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let analytic = Tensor::zeros(1, 2);
        let err = grad_check(
            |v| Ok(if v.data()[1] < 0.0 { f64::NAN } else { v.sum() }),
            &x,
            &analytic,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, AutogradError::NonFinite { index: 1, .. }));
    }
}
