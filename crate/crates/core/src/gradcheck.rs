//! Central finite-difference oracle for analytic gradients.

use crate::error::{Error, Result};

/// Central differences `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` for every coordinate.
pub fn central_differences<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let plus = f(&probe);
        probe[i] = theta[i] - h;
        let minus = f(&probe);
        probe[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective not finite at coordinate {i} (+h: {plus}, -h: {minus})"
            )));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Relative error between one analytic and one numeric partial derivative.
#[inline]
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Largest coordinate-wise relative error between `analytic` and the central
/// difference estimate of `∇f(θ)`.
pub fn check_gradient<F>(f: F, theta: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != theta.len() {
        return Err(Error::Dimension {
            op: "check_gradient",
            left: (1, theta.len()),
            right: (1, analytic.len()),
        });
    }
    let numeric = central_differences(f, theta, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_norm(t: &[f64]) -> f64 {
        0.5 * t.iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn quadratic_is_exact() {
        let theta = [0.3, -1.2, 2.5, 0.0, 7.0];
        let err = check_gradient(half_norm, &theta, &theta, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let theta = [0.3, -1.2, 2.5];
        let bad: Vec<f64> = theta.iter().map(|v| v * 1.01).collect();
        let err = check_gradient(half_norm, &theta, &bad, 1e-5).unwrap();
        assert!(err > 1e-3, "{err}");
    }

    #[test]
    fn non_finite_objective_errors() {
        let r = check_gradient(|t: &[f64]| t[0].ln(), &[0.0], &[1.0], 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
