//! Central finite-difference validation of analytic gradients.

pub mod suite;

use crate::error::{Error, Result};
use crate::tensor::Parameter;

/// Denominator floor: gradients smaller than this are compared in absolute
/// terms, where central differences are dominated by round-off.
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient already stored in the selected parameter
/// against `(f(p+h) − f(p−h)) / 2h` for every coordinate.
///
/// Returns the maximum relative error, using `max(|analytic|, |numeric|, GRADIENT_FLOOR)`
/// as the denominator. The parameter value is restored afterwards.
pub fn finite_diff_check<M, S, F>(model: &mut M, select: S, mut f: F, h: f64) -> Result<f64>
where
    S: Fn(&mut M) -> &mut Parameter,
    F: FnMut(&M) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite difference step must be > 0, got {h}")));
    }
    let analytic = select(model).grad.data().to_vec();
    let mut worst = 0.0_f64;
    for (i, &a) in analytic.iter().enumerate() {
        let original = select(model).value.data()[i];
        select(model).value.data_mut()[i] = original + h;
        let plus = f(model);
        select(model).value.data_mut()[i] = original - h;
        let minus = f(model);
        select(model).value.data_mut()[i] = original;
        let (plus, minus) = (plus?, minus?);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!(
                "f is not finite around coordinate {i} of `{}`",
                select(model).name
            )));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let denom = a.abs().max(numeric.abs()).max(GRADIENT_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor2D;

    #[test]
    fn quadratic_is_exact() {
        let mut p = Parameter::new("x", Tensor2D::from_rows(&[[3.0]]).unwrap());
        p.grad.set(0, 0, 6.0);
        let err = finite_diff_check(
            &mut p,
            |p| p,
            |p| Ok(p.value.data().iter().map(|v| v * v).sum()),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut p = Parameter::new("x", Tensor2D::from_rows(&[[1.0, -2.0]]).unwrap());
        let err = finite_diff_check(&mut p, |p| p, |_| Ok(4.0), 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let mut p = Parameter::new("x", Tensor2D::from_rows(&[[1.0]]).unwrap());
        let r = finite_diff_check(&mut p, |p| p, |_| Ok(f64::NAN), 1e-5);
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }
}
