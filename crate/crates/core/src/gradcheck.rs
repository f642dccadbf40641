//! Central finite differences for checking analytic gradients.
//!
//! Only forward evaluations are used here, so a check built on these helpers
//! stays independent of the backward code it verifies.

use alloc::vec::Vec;

pub const DEFAULT_STEP: f64 = 1e-3;
/// Denominator floor of [`relative_error`].
pub const RELATIVE_FLOOR: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i` of `x`.
/// `x` is restored exactly after each probe.
pub fn central_difference(x: &mut [f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    central_difference_at(x, (0..x.len()).collect::<Vec<_>>().as_slice(), step, &mut f)
}

/// Like [`central_difference`], restricted to `coords`.
pub fn central_difference_at(x: &mut [f64], coords: &[usize], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + step;
            let plus = f(x);
            x[i] = orig - step;
            let minus = f(x);
            x[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Worst per-coordinate [`relative_error`].
pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut report = GradCheckReport {
        checked: analytic.len(),
        max_relative_error: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n);
        if e > report.max_relative_error || e.is_nan() {
            report = GradCheckReport {
                max_relative_error: e,
                worst_index: i,
                analytic_at_worst: a,
                numeric_at_worst: n,
                ..report
            };
        }
    }
    report
}
