//! Central finite-difference gradient checking.
//!
//! The numeric side of every gradient test in this workspace: a scalar
//! function is re-evaluated at `x ± eps` per coordinate and the analytic
//! gradient is compared against the central difference with the error
//! measure |analytic - fd| / max(1, |fd|).

use alloc::string::String;
use alloc::vec::Vec;

use crate::math;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Central finite differences of `f` at `x`.
pub fn central_difference<F>(mut f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut point = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + eps;
        let plus = f(&point);
        point[i] = orig - eps;
        let minus = f(&point);
        point[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    out
}

/// max over coordinates of |analytic - fd| / max(1, |fd|).
pub fn max_relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len(), "gradient length mismatch");
    let mut worst = 0.0;
    for (&a, &n) in analytic.iter().zip(fd.iter()) {
        let err = math::abs(a - n) / f64::max(1.0, math::abs(n));
        if err > worst {
            worst = err;
        }
    }
    worst
}

/// Outcome of checking one named gradient.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

/// Compare an analytic gradient of `f` at `x` against central differences.
pub fn check_gradient<F>(
    name: &str,
    f: F,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    tol: f64,
) -> CheckResult
where
    F: FnMut(&[f64]) -> f64,
{
    let fd = central_difference(f, x, eps);
    CheckResult {
        name: String::from(name),
        max_rel_err: max_relative_error(analytic, &fd),
        tolerance: tol,
    }
}

/// Like [`check_gradient`], but coordinates that fail at `eps` are
/// re-measured at `eps / 10`. A piecewise-smooth function (max pooling)
/// can put a kink inside the wider stencil; the refined stencil clears it,
/// while a genuinely wrong gradient stays wrong at every step size.
pub fn check_gradient_refined<F>(
    name: &str,
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    tol: f64,
) -> CheckResult
where
    F: FnMut(&[f64]) -> f64,
{
    let fd = central_difference(&mut f, x, eps);
    let mut point = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut err = math::abs(analytic[i] - fd[i]) / f64::max(1.0, math::abs(fd[i]));
        if err >= tol {
            let fine = eps / 10.0;
            let orig = point[i];
            point[i] = orig + fine;
            let plus = f(&point);
            point[i] = orig - fine;
            let minus = f(&point);
            point[i] = orig;
            let refined = (plus - minus) / (2.0 * fine);
            err = err.min(math::abs(analytic[i] - refined) / f64::max(1.0, math::abs(refined)));
        }
        if err > worst {
            worst = err;
        }
    }
    CheckResult { name: String::from(name), max_rel_err: worst, tolerance: tol }
}
