//! Adaptive moment estimation with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::networks::{Network, ParamKind};
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Moment buffers for one network. Weight decay touches dense weights only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AdamW<F: Real> {
    pub config: AdamWConfig,
    first: Vec<F>,
    second: Vec<F>,
    decay_mask: Vec<bool>,
    steps: u64,
}

impl<F: Real> AdamW<F> {
    pub fn for_network(config: AdamWConfig, net: &Network<F>) -> Self {
        let mut decay_mask = vec![false; net.num_params()];
        for spec in net.layout() {
            if spec.kind == ParamKind::Weight {
                decay_mask[spec.range()].fill(true);
            }
        }
        AdamW {
            config,
            first: vec![F::zero(); net.num_params()],
            second: vec![F::zero(); net.num_params()],
            decay_mask,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    /// One descent step on `params` given `grads` of the loss.
    pub fn step(&mut self, params: &mut [F], grads: &[F]) {
        assert_eq!(params.len(), self.first.len(), "parameter length");
        assert_eq!(grads.len(), self.first.len(), "gradient length");
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
        let step = F::of(c.lr / bias1);
        let inv_bias2 = F::of(1.0 / bias2);
        let eps = F::of(c.eps);
        let shrink = F::of(1.0 - c.lr * c.weight_decay);
        for i in 0..params.len() {
            let g = grads[i];
            let m = b1 * self.first[i] + one_b1 * g;
            let v = b2 * self.second[i] + one_b2 * g * g;
            self.first[i] = m;
            self.second[i] = v;
            let mut p = params[i];
            if self.decay_mask[i] {
                p = p * shrink;
            }
            params[i] = p - step * m / ((v * inv_bias2).sqrt() + eps);
        }
    }
}
