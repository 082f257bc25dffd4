//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checker perturbs every scalar of every non-frozen parameter by ±h,
//! re-evaluates the loss, and compares (f(x+h) - f(x-h)) / 2h against the
//! analytic gradient. All checking runs in f64; h defaults to 1e-5.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_H: f64 = 1e-5;

/// Worst relative error over all checked scalars.
#[derive(Clone, Debug)]
pub struct FdOutcome {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub scalars_checked: usize,
}

/// A loss builder: constructs the forward computation in a fresh graph and
/// returns the scalar loss node. It must be a pure function of the store.
pub trait LossFn: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId> {}
impl<T: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>> LossFn for T {}

fn eval_loss(loss_fn: &impl LossFn, store: &ParamStore<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.scalar_value(loss)
}

/// Compare reverse-mode gradients against central finite differences.
pub fn finite_difference_check(
    loss_fn: &impl LossFn,
    store: &mut ParamStore<f64>,
    h: f64,
) -> Result<FdOutcome> {
    let l1 = eval_loss(loss_fn, store)?;
    let l2 = eval_loss(loss_fn, store)?;
    if l1.to_bits() != l2.to_bits() {
        return Err(Error::NonDeterministicLoss);
    }

    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let analytic = g.gradients(loss, store)?;
    compare_with_finite_differences(loss_fn, store, h, &analytic)
}

/// Compare a supplied gradient map against finite differences. Split out so
/// tests can feed deliberately corrupted gradients and watch the check fail.
pub fn compare_with_finite_differences(
    loss_fn: &impl LossFn,
    store: &mut ParamStore<f64>,
    h: f64,
    analytic: &BTreeMap<String, Tensor<f64>>,
) -> Result<FdOutcome> {
    let names = store.learnable_names();
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut checked = 0usize;
    for name in &names {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::MissingGradient { name: name.clone() })?
            .clone();
        let n = store.tensor(name)?.numel();
        for i in 0..n {
            let orig = store.tensor(name)?.data()[i];
            store.tensor_mut(name)?.data_mut()[i] = orig + h;
            let lp = eval_loss(loss_fn, store)?;
            store.tensor_mut(name)?.data_mut()[i] = orig - h;
            let lm = eval_loss(loss_fn, store)?;
            store.tensor_mut(name)?.data_mut()[i] = orig;

            let numeric = (lp - lm) / (2.0 * h);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            checked += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name}[{i}]");
            }
        }
    }
    Ok(FdOutcome {
        max_rel_error: max_rel,
        worst_param: worst,
        scalars_checked: checked,
    })
}
