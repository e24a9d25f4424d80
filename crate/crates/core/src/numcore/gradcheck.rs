use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so that gradients near zero are
/// compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport<T> {
    pub max_relative_error: T,
    /// Component with the worst error.
    pub worst_index: usize,
    pub numeric: Vec<T>,
}

impl<T: Scalar> GradCheckReport<T> {
    pub fn passes(&self, tolerance: T) -> bool {
        self.max_relative_error <= tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error<T: Scalar>(analytic: T, numeric: T) -> T {
    let denom = analytic.abs().max(numeric.abs()).max(T::lit(RELATIVE_ERROR_FLOOR));
    (analytic - numeric).abs() / denom
}

/// Central-difference gradient of `f` at `point`.
pub fn numeric_gradient<T: Scalar, F: FnMut(&[T]) -> T>(mut f: F, point: &[T], step: T) -> Result<Vec<T>> {
    let mut x = point.to_vec();
    let two_h = step + step;
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x);
        x[i] = orig - step;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Check(format!("function non-finite near component {i}")));
        }
        grad.push((fp - fm) / two_h);
    }
    Ok(grad)
}

/// Compares `analytic` against central differences of `f` and reports the
/// worst componentwise relative error.
pub fn finite_diff_check<T: Scalar, F: FnMut(&[T]) -> T>(
    f: F,
    point: &[T],
    analytic: &[T],
    step: T,
) -> Result<GradCheckReport<T>> {
    if analytic.len() != point.len() {
        return Err(Error::Check(format!(
            "analytic gradient has {} components for a {}-dimensional point",
            analytic.len(),
            point.len()
        )));
    }
    if let Some(i) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::Check(format!("analytic gradient non-finite at component {i}")));
    }
    let numeric = numeric_gradient(f, point, step)?;
    let mut worst = (T::zero(), 0);
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(a, n);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_index: worst.1,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = finite_diff_check(|x: &[f64]| x[0] * x[0], &[3.0], &[6.0], DEFAULT_STEP).unwrap();
        assert!(r.max_relative_error < 1e-9);
        assert!((r.numeric[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn detects_wrong_gradient() {
        let r = finite_diff_check(|x: &[f64]| x[0] * x[1], &[2.0, 5.0], &[5.0, 3.0], DEFAULT_STEP).unwrap();
        assert_eq!(r.worst_index, 1);
        assert!(r.max_relative_error > 0.3);
    }

    #[test]
    fn non_finite_function_is_check_error() {
        let r = finite_diff_check(|x: &[f64]| (x[0]).ln(), &[0.0], &[1.0], DEFAULT_STEP);
        assert!(matches!(r, Err(Error::Check(_))));
    }
}
