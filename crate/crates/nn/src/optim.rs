use std::collections::HashMap;

use crate::error::{NnError, Result};
use crate::graph::Gradients;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Adam with decoupled weight decay. `weight_decay = 0` gives plain Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, moments: HashMap::new() }
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(lr, 0.0)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient.
    ///
    /// Gradients are checked for finiteness before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let mut updates: Vec<(ParamId, &Tensor)> = Vec::new();
        for id in store.ids() {
            if !store.is_trainable(id) {
                continue;
            }
            if let Some(g) = grads.param(store, id) {
                if !g.all_finite() {
                    return Err(NnError::NonFiniteGradient(store.name(id).to_string()));
                }
                updates.push((id, g));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in updates {
            let n = g.len();
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let p = store.get_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * self.weight_decay * p[i];
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `base` to `eta_min` over `t_max` steps.
pub fn cosine_lr(step: usize, base: f64, t_max: usize, eta_min: f64) -> f64 {
    if t_max == 0 {
        return base;
    }
    let s = step.min(t_max) as f64 / t_max as f64;
    eta_min + 0.5 * (base - eta_min) * (1.0 + (std::f64::consts::PI * s).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(&[3], vec![1.0, -2.0, 0.5]));
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let target = g.input(Tensor::zeros(&[3]));
        let loss = g.mse(p, target).unwrap();
        let grads = g.backward(loss);
        let mut opt = AdamW::adam(0.1);
        opt.step(&mut store, &grads).unwrap();
        // m_hat/sqrt(v_hat) = sign(g) on the first step
        let got = store.get(id).data();
        let want = [0.9, -1.9, 0.4];
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient_signal() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(&[1], vec![2.0]));
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let loss = g.scale(p, 0.0);
        let loss = g.mean(loss);
        let grads = g.backward(loss);
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut store, &grads).unwrap();
        assert!((store.get(id).data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 1.0, 10, 0.0), 1.0);
        assert!((cosine_lr(5, 1.0, 10, 0.0) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(10, 1.0, 10, 0.1) - 0.1 < 1e-12);
        assert_eq!(cosine_lr(20, 1.0, 10, 0.1), cosine_lr(10, 1.0, 10, 0.1));
    }
}
