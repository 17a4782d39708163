//! AdamW with decoupled weight decay.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Optimizer state: first and second moment per parameter plus a step count.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Option<Tensor>>,
    pub second: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        Self {
            config,
            step: 0,
            first: vec![None; num_params],
            second: vec![None; num_params],
        }
    }

    /// One update. `lr` overrides the configured rate (for schedules).
    /// Parameters without a gradient are left untouched, including decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f32) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.first.resize(store.len(), None);
        self.second.resize(store.len(), None);
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - (c.beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (c.beta2 as f64).powi(self.step as i32);
        let step_size = (lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let decay = 1.0 - lr * c.weight_decay;
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let shape = g.shape().to_vec();
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(shape));
            let p = store.get_mut(ParamId(i));
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *p *= decay;
                *p -= step_size * *m / (v.sqrt() / bc2_sqrt + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamSink};

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut store = ParamStore::new(0);
        let id = store.param("w", &[16], Init::Uniform { bound: 1.0 });
        let before = store.get(id).clone();
        let mut opt = AdamW::new(AdamWConfig::default(), store.len());
        opt.step(&mut store, &[Some(Tensor::ones([16]))], 0.0);
        assert_eq!(store.get(id), &before);
    }

    /// First step of Adam moves each weight by ~lr * sign(g).
    #[test]
    fn first_step_is_sign_like() {
        let mut store = ParamStore::new(0);
        let id = store.param("w", &[2], Init::Zeros);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            1,
        );
        opt.step(&mut store, &[Some(Tensor::from_vec([2], vec![3.0, -0.5]))], 0.1);
        let w = store.get(id).data();
        assert!((w[0] + 0.1).abs() < 1e-5 && (w[1] - 0.1).abs() < 1e-5);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut store = ParamStore::new(0);
        let id = store.param("w", &[1], Init::Const(2.0));
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.5,
                ..Default::default()
            },
            1,
        );
        opt.step(&mut store, &[Some(Tensor::zeros([1]))], 0.1);
        // Zero gradient: only the decay term acts.
        assert!((store.get(id).data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-6);
    }
}
