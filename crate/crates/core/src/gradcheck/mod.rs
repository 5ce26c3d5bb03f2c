//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

/// Step used for central differences on `f64` values.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error. Gradients smaller than this are
/// compared on an absolute scale of `floor * tolerance`.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Coordinate where the worst error occurred.
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates excluded as non-differentiable points.
    pub skipped: usize,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `f` at `x`.
pub fn finite_diff_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], tolerance: f64) -> Result<FdReport> {
    finite_diff_check_masked(f, x, analytic, tolerance, |_, _| false)
}

/// Like [`finite_diff_check`], skipping every coordinate `i` for which
/// `skip(i, x[i])` holds (kinks such as ReLU at 0).
pub fn finite_diff_check_masked(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    tolerance: f64,
    skip: impl Fn(usize, f64) -> bool,
) -> Result<FdReport> {
    if analytic.len() != x.len() {
        return Err(Error::Config(format!("gradient of length {} for {} parameters", analytic.len(), x.len())));
    }
    let mut probe = x.to_vec();
    let mut report = FdReport { max_rel_err: 0.0, worst_index: 0, checked: 0, skipped: 0, tolerance };
    for i in 0..x.len() {
        if skip(i, x[i]) {
            report.skipped += 1;
            continue;
        }
        probe[i] = x[i] + FD_STEP;
        let up = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at coordinate {i}: analytic {}, numeric {numeric}",
                analytic[i]
            )));
        }
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative() {
        let r = finite_diff_check(|x| x[0] * x[0], &[3.0], &[6.0], 1e-8).unwrap();
        assert!(r.passed() && r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let r = finite_diff_check(|x| x[0] * x[0] + x[1], &[3.0, 1.0], &[6.0, 1.1], 1e-6).unwrap();
        assert!(!r.passed());
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn kinks_can_be_excluded() {
        let relu = |x: &[f64]| x.iter().map(|v| v.max(0.0)).sum::<f64>();
        let x = [0.0, 2.0, -1.0];
        let r = finite_diff_check_masked(relu, &x, &[0.0, 1.0, 0.0], 1e-9, |_, v| v.abs() < FD_STEP).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 2);
        assert!(r.passed());
    }

    #[test]
    fn non_finite_values_are_numeric_errors() {
        let r = finite_diff_check(|x| (x[0]).ln(), &[0.0], &[1.0], 1e-6);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}

mod suite;
pub use suite::{run_suite, OpReport, Suite, SUITE_TOLERANCE};
