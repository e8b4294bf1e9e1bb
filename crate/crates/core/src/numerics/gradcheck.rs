//! Central finite-difference verification of analytic gradients.
//!
//! The caller owns parameter storage and supplies an `eval` closure that
//! perturbs one named coordinate, recomputes the loss in 64-bit floats,
//! and restores the coordinate. This keeps the checker independent of any
//! particular model layout.

use crate::error::Result;
use crate::numerics::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Number of coordinates compared.
    pub checked: usize,
    /// Largest relative error seen.
    pub max_rel_err: f64,
    /// Parameter tensor holding the worst coordinate.
    pub worst_param: String,
    /// Flat index of the worst coordinate within that tensor.
    pub worst_index: usize,
    /// Worst relative error per parameter tensor, in input order.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Indices to probe in a tensor of `numel` elements: all of them, or
/// `k` evenly spaced ones when a sample budget is given.
fn probe_indices(numel: usize, samples: Option<usize>) -> Vec<usize> {
    match samples {
        None => (0..numel).collect(),
        Some(k) if k >= numel => (0..numel).collect(),
        Some(k) => {
            let stride = numel as f64 / k as f64;
            (0..k).map(|j| (j as f64 * stride) as usize).collect()
        }
    }
}

/// Compares analytic gradients against central differences.
///
/// `grads` pairs each parameter name with its analytic gradient tensor.
/// `eval(name, index, delta)` must return the loss with that single
/// coordinate shifted by `delta`, leaving the parameters as found.
/// `samples_per_tensor` limits how many coordinates of each tensor are
/// probed (evenly spaced); `None` checks every coordinate.
pub fn finite_diff_check(
    grads: &[(String, Tensor)],
    mut eval: impl FnMut(&str, usize, f64) -> Result<f64>,
    step: f64,
    samples_per_tensor: Option<usize>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        per_param: Vec::with_capacity(grads.len()),
    };
    for (name, grad) in grads {
        let mut tensor_worst = 0.0;
        for idx in probe_indices(grad.numel(), samples_per_tensor) {
            let plus = eval(name, idx, step)?;
            let minus = eval(name, idx, -step)?;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = relative_error(grad.data()[idx], numeric);
            report.checked += 1;
            if rel > tensor_worst {
                tensor_worst = rel;
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = idx;
            }
        }
        report.per_param.push((name.clone(), tensor_worst));
    }
    Ok(report)
}
