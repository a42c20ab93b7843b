//! Central finite-difference gradient checking in 64-bit precision.
//!
//! Relative error of one entry is `|a - n| / max(|a|, |n|, REL_FLOOR·s)`
//! with `s = max(1, |f|)` the magnitude of the checked function. Finite
//! differences carry round-off of order `|f|·u/eps`, so gradient entries
//! far below the function's own scale are judged against that floor rather
//! than against themselves. The floor also makes the check invariant to
//! rescaling the function.

use rand::seq::index::sample;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const REL_FLOOR: f64 = 1e-4;

/// `scale` is the magnitude of the checked function at the base point.
pub fn relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let floor = REL_FLOOR * scale.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    /// `max(1, |f|)` at the base point.
    pub scale: f64,
    pub max_rel_error: f64,
    /// Location of the worst entry, e.g. `"input 0 [5]"`.
    pub worst: String,
}

impl GradReport {
    fn record(&mut self, analytic: f64, numeric: f64, location: impl FnOnce() -> String) {
        let e = relative_error(analytic, numeric, self.scale);
        self.checked += 1;
        if self.worst.is_empty() || e > self.max_rel_error {
            self.max_rel_error = e;
            self.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", location());
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        if other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.max_rel_error.is_finite()
    }
}

fn indices(n: usize, limit: Option<usize>, rng: &mut SeededRng) -> Vec<usize> {
    match limit {
        Some(l) if l < n => {
            let mut v = sample(rng, n, l).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

/// Checks gradients of a scalar function with respect to its tensor inputs.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x)).collect();
    let out = f(&mut tape, &vars)?;
    let scale = tape.item(out).abs().max(1.0);
    let grads = tape.backward(out)?;

    let mut report = GradReport { scale, ..GradReport::default() };
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            report.record(analytic[i], (plus - minus) / (2.0 * eps), || format!("input {k} [{i}]"));
        }
    }
    Ok(report)
}

/// Checks gradients of a scalar function with respect to the parameters in
/// `store`. `per_tensor` caps how many randomly chosen entries are
/// perturbed in each tensor.
pub fn check_params<F>(
    store: &mut ParamStore<f64>,
    eps: f64,
    per_tensor: Option<usize>,
    rng: &mut SeededRng,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::with_params(store);
        let out = f(&mut tape)?;
        Ok(tape.item(out))
    };

    let (scale, grads) = {
        let mut tape = Tape::with_params(store);
        let out = f(&mut tape)?;
        (tape.item(out).abs().max(1.0), tape.backward(out)?)
    };

    let mut report = GradReport { scale, ..GradReport::default() };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let analytic = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for i in indices(n, per_tensor, rng) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let name = store.name(id).to_string();
            report.record(analytic[i], (plus - minus) / (2.0 * eps), || format!("{name} [{i}]"));
        }
    }
    Ok(report)
}
