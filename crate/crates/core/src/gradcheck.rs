//! Central finite-difference check of analytic gradients.

use serde::{Deserialize, Serialize};

/// Finite-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-6;

/// Denominator floor of the relative error, so components whose true
/// gradient is ~0 are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error used by every gradient comparison in this crate.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Central differences of a scalar function at `theta`.
pub fn numeric_gradient<F>(f: &F, theta: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut work = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + step;
            let up = f(&work);
            work[i] = orig - step;
            let down = f(&work);
            work[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Compares `analytic` against central differences of `f` at `theta`.
pub fn grad_check<F>(f: F, theta: &[f64], analytic: &[f64], tol: f64) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(theta.len(), analytic.len(), "gradient length mismatch");
    let numeric = numeric_gradient(&f, theta, FD_STEP);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
        tolerance: tol,
        passed: true,
    };
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = rel_error(a, n);
        if e > report.max_rel_error || !e.is_finite() {
            report.max_rel_error = e;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = n;
        }
    }
    report.passed = report.max_rel_error < tol;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(|t| t[0] * t[0], &[3.0], &[6.0], 1e-4);
        assert!(r.passed);
        assert!((r.numeric - 6.0).abs() < 1e-6);
    }

    #[test]
    fn wrong_gradient_fails() {
        let r = grad_check(|t| t[0] * t[0], &[3.0], &[5.0], 1e-4);
        assert!(!r.passed);
    }
}
