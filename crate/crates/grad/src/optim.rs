//! AdamW with bias correction and decoupled weight decay.

use crate::array::Array;
use crate::params::{ParamId, ParamStore};
use crate::tape::Gradients;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale the gradient so its global L2 norm does not exceed this.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, max_grad_norm: None }
    }
}

/// Per-parameter moments plus hyperparameters.
#[derive(Clone, Debug)]
pub struct OptState {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.value(id).numel()]).collect();
        Self { config, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update using the gradients recorded on a tape.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step_with(store, |id| grads.param(id));
    }

    /// One AdamW update; `grad_of` returns `None` for parameters without a gradient
    /// (treated as zero).
    pub fn step_with<'g>(&mut self, store: &mut ParamStore, grad_of: impl Fn(ParamId) -> Option<&'g Array>) {
        assert_eq!(self.first.len(), store.len(), "optimizer state was built for a different store");
        let cfg = &self.config;
        assert!(cfg.lr > 0.0, "learning rate must be positive");
        let clip = match cfg.max_grad_norm {
            Some(max) => {
                let sq: f64 = store
                    .ids()
                    .filter_map(|id| grad_of(id))
                    .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
                    .sum();
                let norm = sq.sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let decay = 1.0 - cfg.lr * cfg.weight_decay;
        for id in store.ids().collect::<Vec<_>>() {
            let g = grad_of(id);
            let p = store.value_mut(id);
            if let Some(g) = g {
                assert_eq!(g.shape(), p.shape(), "gradient shape mismatch for parameter {}", id.index());
            }
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            assert_eq!(m.len(), p.numel(), "moment shape mismatch for parameter {}", id.index());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g.data()[i] * clip);
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w = *w * decay - cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
}
