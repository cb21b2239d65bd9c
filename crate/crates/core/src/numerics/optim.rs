use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

/// Adam with per-parameter first/second moment buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update; parameters without a gradient are left untouched.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c = self.config;
        let norm = grads.global_norm();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            if !params.get(id).trainable {
                continue;
            }
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params.value_mut(id).data_mut();
            for (((pj, mj), vj), gj) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                let gj = gj * clip;
                *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj;
                *vj = c.beta2 * *vj + (1.0 - c.beta2) * gj * gj;
                *pj -= c.lr * (*mj / bc1) / ((*vj / bc2).sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![3.0, -2.0]));
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &store);
        for _ in 0..300 {
            let grads = {
                let mut g = Graph::new(&store);
                let p = g.param(x);
                let sq = g.mul(p, p).unwrap();
                let l = g.sum(sq);
                g.backward(l).unwrap()
            };
            adam.update(&mut store, &grads);
        }
        assert!(store.value(x).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![1.0]));
        let y = store.add("y", Tensor::vector(vec![1.0]));
        store.set_trainable(y, false);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let grads = {
            let mut g = Graph::new(&store);
            let (px, py) = (g.param(x), g.param(y));
            let s = g.mul(px, py).unwrap();
            let l = g.sum(s);
            g.backward(l).unwrap()
        };
        assert!(grads.get(y).is_none());
        adam.update(&mut store, &grads);
        assert_eq!(store.value(y).data(), &[1.0]);
        assert_ne!(store.value(x).data(), &[1.0]);
    }
}
