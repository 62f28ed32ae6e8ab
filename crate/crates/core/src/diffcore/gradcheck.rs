use crate::error::{Error, Result};

use super::params::{BoundParams, ParamId, ParamSet};
use super::tape::{Tape, Var};
use super::{evaluate, evaluate_with_gradients};

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, ERROR_FLOOR)`
    /// over all checked scalars.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Gradient magnitudes below this are compared in absolute terms, since
/// central differences cannot resolve them relative to round-off.
pub const ERROR_FLOOR: f64 = 1e-6;

/// Compares the tape gradient of `build` against central differences with
/// step `h` for every scalar parameter.
///
/// `build` is invoked `2·P + 1` times and must be deterministic: stochastic
/// losses should re-seed their generators inside the closure.
pub fn finite_difference_check<F>(params: &ParamSet, h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &BoundParams) -> Result<Var>,
{
    finite_difference_check_where(params, h, |_| true, build)
}

/// As [`finite_difference_check`], restricted to parameters whose name
/// satisfies `include`.
pub fn finite_difference_check_where<F, P>(params: &ParamSet, h: f64, include: P, build: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &BoundParams) -> Result<Var>,
    P: Fn(&str) -> bool,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::invalid(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let (_, analytic) = evaluate_with_gradients(params, &build)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = params.clone();
    for (id, name, value) in params.iter().filter(|(_, name, _)| include(name)) {
        for i in 0..value.len() {
            let orig = value.as_slice()[i];
            probe.get_mut(id).as_mut_slice()[i] = orig + h;
            let plus = evaluate(&probe, &build)?;
            probe.get_mut(id).as_mut_slice()[i] = orig - h;
            let minus = evaluate(&probe, &build)?;
            probe.get_mut(id).as_mut_slice()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(ParamId(id.0)).as_slice()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ERROR_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.to_string();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
