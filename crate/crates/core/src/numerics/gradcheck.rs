//! Central-difference verification of reverse-mode gradients.

use super::graph::{eval, value_and_grad, Bindings, Graph, Var};
use super::ParamSet;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    pub pass: bool,
}

/// Relative error with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of `f` with the fourth-order central
/// difference `(8[f(p+h) − f(p−h)] − [f(p+2h) − f(p−2h)]) / 12h`, `h = eps`,
/// on every trainable coordinate of `params`.
pub fn finite_diff_check<F>(f: F, params: &ParamSet, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &Bindings<'g>) -> Result<Var<'g>>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let (_, analytic) = value_and_grad(&f, params)?;
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
        pass: true,
    };
    let names: Vec<String> = params.trainable_names().map(str::to_owned).collect();
    for name in names {
        let n = params.get(&name)?.len();
        for i in 0..n {
            let orig = params.get(&name)?.data()[i];
            let mut at = |h: f64| -> Result<f64> {
                work.trainable_mut(&name)?.data_mut()[i] = orig + h;
                eval(&f, &work)
            };
            let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
            work.trainable_mut(&name)?.data_mut()[i] = orig;

            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let err = relative_error(analytic[&name].data()[i], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}
