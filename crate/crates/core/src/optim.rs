//! AdamW: adaptive moments with decoupled weight decay.
//!
//! The decay term is applied directly to the parameter, not folded into the
//! gradient. Frozen entries are never touched; supplying a gradient for one
//! is a freeze-contract violation and a hard error.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    /// Apply one update. `grads` must cover exactly the non-frozen entries of
    /// the store: a gradient for a frozen or unknown name is an error, as is
    /// a missing gradient for a learnable one.
    pub fn step<E: Element>(
        &mut self,
        store: &mut ParamStore<E>,
        grads: &BTreeMap<String, Tensor<E>>,
    ) -> Result<()> {
        for name in grads.keys() {
            if !store.contains(name) {
                return Err(Error::UnknownParam { name: name.clone() });
            }
            if store.is_frozen(name)? {
                return Err(Error::FrozenGradient { name: name.clone() });
            }
        }
        let learnable = store.learnable_names();
        for name in &learnable {
            if !grads.contains_key(name) {
                return Err(Error::MissingGradient { name: name.clone() });
            }
        }

        self.step += 1;
        let t = self.step;
        let bc1 = 1.0 - self.cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(t as i32);

        for name in &learnable {
            let grad = &grads[name];
            let param = store.tensor_mut(name)?;
            if grad.shape() != param.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: param.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let n = param.numel();
            let slot = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            if slot.m.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_state",
                    lhs: vec![slot.m.len()],
                    rhs: vec![n],
                });
            }
            let data = param.data_mut();
            for i in 0..n {
                let g = grad.data()[i].to_f64();
                let m = self.cfg.beta1 * slot.m[i] + (1.0 - self.cfg.beta1) * g;
                let v = self.cfg.beta2 * slot.v[i] + (1.0 - self.cfg.beta2) * g * g;
                slot.m[i] = m;
                slot.v[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                let p = data[i].to_f64();
                let update = m_hat / (v_hat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * p;
                data[i] = E::from_f64(p - self.cfg.lr * update);
            }
        }
        Ok(())
    }
}
