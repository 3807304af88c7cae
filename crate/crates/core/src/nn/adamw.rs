use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::num::Scalar;

use super::ParamStore;

/// AdamW hyperparameters (decoupled weight decay).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamWState<T: Scalar> {
    pub m: BTreeMap<String, ArrayD<T>>,
    pub v: BTreeMap<String, ArrayD<T>>,
    pub step: usize,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }
}

impl<T: Scalar> Default for AdamWState<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Scale gradients in place so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut BTreeMap<String, ArrayD<T>>, max_norm: f64) -> f64 {
    let mut total = 0.0f64;
    for g in grads.values() {
        for v in g.iter() {
            let x = v.into_f64();
            total += x * x;
        }
    }
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// AdamW optimizer over a subset of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg }
    }

    /// Apply one update. Only parameters present in `grads` are touched.
    pub fn step<T: Scalar>(
        &self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, ArrayD<T>>,
        state: &mut AdamWState<T>,
    ) {
        state.step += 1;
        let t = state.step as f64;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        for (name, grad) in grads {
            let p = params.get_mut(name);
            let m = state
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = state
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            for ((pe, ge), (me, ve)) in p
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = ge.into_f64();
                let mn = b1 * me.into_f64() + (1.0 - b1) * g;
                let vn = b2 * ve.into_f64() + (1.0 - b2) * g * g;
                *me = T::from_f64(mn);
                *ve = T::from_f64(vn);
                let mhat = mn / bias1;
                let vhat = vn / bias2;
                let update = mhat / (vhat.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * pe.into_f64();
                *pe = T::from_f64(pe.into_f64() - self.cfg.lr * update);
            }
        }
    }
}
