use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::{ParamStore, Scalar, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip_norm: 1.0 }
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices only; biases,
/// norms and embeddings of rank one are left undecayed.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Applies one update; returns the pre-clip global gradient norm.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> f64 {
        let c = &self.config;
        let norm = grads.values().map(|g| g.sum_squares().f64()).sum::<f64>().sqrt();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let lr = c.lr;
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| g.scale(T::zero()));
            let v = self.v.entry(name.clone()).or_insert_with(|| g.scale(T::zero()));
            let decay = if p.shape().len() >= 2 { T::c(1.0 - lr * c.weight_decay) } else { T::one() };
            let clip = T::c(clip);
            let step = T::c(lr / bc1);
            let inv_bc2 = T::c(1.0 / bc2);
            let eps = T::c(c.eps);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let gv = gv * clip;
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv = *pv * decay - step * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
        norm
    }
}
