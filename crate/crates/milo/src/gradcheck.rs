//! Central finite differences for validating analytic gradients.
//!
//! The comparison convention used throughout the crate: relative error is
//! `|a - n| / max(|a|, |n|, floor)`, with step `h = 1e-5` unless a caller
//! overrides it. Per-op checks use `REL_ERR_FLOOR`; callers whose function
//! values are large enough that finite-difference noise exceeds the default
//! floor pass a wider one via the `_floored` variants.

/// Default central-difference step.
pub const DEFAULT_H: f64 = 1e-5;

/// Default floor for the relative-error denominator, guarding near-zero
/// entries in per-op checks where function values are O(1).
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Relative error between an analytic and a numeric value.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    rel_err_floored(analytic, numeric, REL_ERR_FLOOR)
}

/// Relative error with an explicit denominator floor. Entries below `floor`
/// in magnitude are held to an absolute bound of `floor * tol` instead of a
/// relative one.
pub fn rel_err_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central-difference gradient of `f` at `x`: `(f(x+h·e_i) - f(x-h·e_i)) / 2h`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let up = f(&xs);
        xs[i] = orig - h;
        let down = f(&xs);
        xs[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Summary of an analytic-vs-numeric gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
}

/// Elementwise comparison of an analytic gradient against a numeric one.
pub fn compare(analytic: &[f64], numeric: &[f64]) -> FdReport {
    compare_floored(analytic, numeric, REL_ERR_FLOOR)
}

/// Elementwise comparison with an explicit relative-error floor.
pub fn compare_floored(analytic: &[f64], numeric: &[f64], floor: f64) -> FdReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths must match");
    let mut report = FdReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let r = rel_err_floored(a, n, floor);
        if r > report.max_rel_err {
            report.max_rel_err = r;
            report.worst_index = i;
        }
        report.max_abs_err = report.max_abs_err.max((a - n).abs());
    }
    report
}
