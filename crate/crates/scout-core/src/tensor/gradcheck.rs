//! Central-difference gradient checking.
//!
//! Every hand-written backward rule in this crate is validated against the
//! numeric derivative of its forward pass. The checker perturbs a sample
//! of coordinates per parameter and compares the analytic gradient with a
//! symmetric finite difference.

use crate::error::{Error, Result};
use crate::rng::RngState;

use super::Param;

/// Perturbation used for central differences.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Something whose scalar loss and parameter gradients can be evaluated
/// repeatedly. `eval(true)` must (re)compute gradients into the params;
/// `eval(false)` only needs to return the loss. The function must be
/// deterministic: stochastic layers have to be disabled or frozen.
pub trait GradTarget {
    fn params_mut(&mut self) -> &mut [Param];
    fn eval(&mut self, accumulate_grads: bool) -> Result<f64>;
}

/// Convenience [`GradTarget`] built from a parameter list and a closure.
pub struct ClosureTarget<F>
where
    F: FnMut(&mut [Param], bool) -> Result<f64>,
{
    pub params: Vec<Param>,
    pub f: F,
}

impl<F> GradTarget for ClosureTarget<F>
where
    F: FnMut(&mut [Param], bool) -> Result<f64>,
{
    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn eval(&mut self, accumulate_grads: bool) -> Result<f64> {
        (self.f)(&mut self.params, accumulate_grads)
    }
}

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over sampled coordinates of
    /// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_err: f64,
    /// Parameter owning the worst coordinate (empty if nothing was checked).
    pub worst_param: String,
    pub coords_checked: usize,
}

/// Compare analytic gradients against central differences with step
/// [`GRAD_CHECK_STEP`], sampling at least `min_coords` coordinates per
/// parameter (all of them for small parameters).
pub fn grad_check<T: GradTarget>(
    target: &mut T,
    rng: &RngState,
    min_coords: usize,
) -> Result<GradCheckReport> {
    for p in target.params_mut() {
        p.zero_grad();
    }
    target.eval(true)?;
    let analytic: Vec<Vec<f64>> = target
        .params_mut()
        .iter()
        .map(|p| p.grad.data().to_vec())
        .collect();
    for (p, grads) in target.params_mut().iter().zip(&analytic) {
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite analytic gradient in {}",
                p.name
            )));
        }
    }

    let n_params = target.params_mut().len();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        coords_checked: 0,
    };
    for pi in 0..n_params {
        let numel = target.params_mut()[pi].numel();
        let name = target.params_mut()[pi].name.clone();
        let coords: Vec<usize> = if numel <= min_coords {
            (0..numel).collect()
        } else {
            // Distinct coordinates from a per-parameter stream.
            let mut stream = rng.child("grad-check", pi as u64).stream();
            let mut seen = std::collections::BTreeSet::new();
            while seen.len() < min_coords {
                seen.insert(stream.below(numel as u64) as usize);
            }
            seen.into_iter().collect()
        };
        for c in coords {
            let orig = target.params_mut()[pi].value.data()[c];
            target.params_mut()[pi].value.data_mut()[c] = orig + GRAD_CHECK_STEP;
            let plus = target.eval(false)?;
            target.params_mut()[pi].value.data_mut()[c] = orig - GRAD_CHECK_STEP;
            let minus = target.eval(false)?;
            target.params_mut()[pi].value.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite numeric gradient in {name} coord {c}"
                )));
            }
            let a = analytic[pi][c];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}
