//! Central finite-difference oracle for analytic gradients.
//!
//! The oracle only re-runs the forward pass with perturbed parameter values;
//! it never touches the backward implementation it checks.

use super::{Graph, Mode, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_per_param: usize,
    pub mode: Mode,
    /// Dropout seed; every forward evaluation reuses it so masks agree.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-6,
            max_per_param: usize::MAX,
            mode: Mode::Train,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backward-pass gradients of `f` with central differences over
/// every trainable parameter in `store`.
pub fn check<F>(store: &ParamStore<f64>, opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(opts.mode, opts.seed);
        let out = f(&mut g, s)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new(opts.mode, opts.seed);
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = store.clone();
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        let base = store.get(id).clone();
        let n = base.numel();
        let zeros = Tensor::zeros(base.shape().to_vec());
        let analytic = grads.param(id).unwrap_or(&zeros);
        let stride = n.div_ceil(opts.max_per_param.min(n)).max(1);
        for i in (0..n).step_by(stride) {
            let mut plus = base.to_vec();
            plus[i] += opts.step;
            probe.set(id, Tensor::new(base.shape().to_vec(), plus)?)?;
            let fp = eval(&probe)?;
            let mut minus = base.to_vec();
            minus[i] -= opts.step;
            probe.set(id, Tensor::new(base.shape().to_vec(), minus)?)?;
            let fm = eval(&probe)?;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic.data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for `{}`[{i}]",
                    store.name(id)
                )));
            }
            let err = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((store.name(id).to_string(), i, a, numeric));
                }
            }
        }
        probe.set(id, base)?;
    }
    Ok(report)
}
