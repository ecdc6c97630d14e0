//! Central finite-difference gradient checking.
//!
//! The oracle re-runs the forward pass with perturbed parameter entries and
//! never touches the tape's backward rules, so it independently validates
//! them. `build` must be a pure function of the store's current values.

use crate::error::Result;
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Worst relative disagreement seen.
    pub max_rel: f64,
    /// Number of parameter entries compared.
    pub checked: usize,
}

fn eval(build: &impl Fn(&mut Tape, &ParamStore) -> Result<Var>, store: &ParamStore) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    tape.value(loss)?.item()
}

/// Compares analytic gradients of the scalar `build` output against central
/// finite differences over every entry of every parameter.
///
/// Disagreement is measured as `|analytic - numeric| / max(1, |analytic|,
/// |numeric|)`; returns an error from the forward pass, and panics are left
/// to the caller's assertions on the report.
pub fn check(
    store: &mut ParamStore,
    build: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
    eps: f64,
) -> Result<GradCheckReport> {
    store.reset_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Tensor> = (0..store.len()).map(|s| store.grad(s).clone()).collect();
    store.reset_grads();

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for slot in 0..store.len() {
        for idx in 0..store.value(slot).numel() {
            let original = store.value(slot).data()[idx];
            store.value_mut(slot).data_mut()[idx] = original + eps;
            let plus = eval(&build, store)?;
            store.value_mut(slot).data_mut()[idx] = original - eps;
            let minus = eval(&build, store)?;
            store.value_mut(slot).data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[slot].data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel, checked })
}
