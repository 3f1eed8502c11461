use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Real};
use crate::error::{Error, Result};

/// Adaptive-moment optimizer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators for every entry of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", config.lr)));
        }
        let zeros = |_| Vec::new();
        let m: Vec<Vec<T>> = store.ids().map(zeros).collect();
        Ok(AdamState {
            config,
            step: 0,
            v: m.clone(),
            m,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every trainable parameter that received a
    /// gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::invalid("optimizer state was built for a different parameter store"));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(c.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            if g.shape() != store.get(id).shape() {
                return Err(Error::invalid(format!(
                    "gradient {:?} does not match parameter `{}` {:?}",
                    g.shape(),
                    store.name(id),
                    store.get(id).shape()
                )));
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            if m.is_empty() {
                m.resize(g.numel(), T::zero());
                v.resize(g.numel(), T::zero());
            }
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + ob1 * gi;
                v[i] = b2 * v[i] + ob2 * gi * gi;
                p[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Mode, Tensor};

    fn scalar_store(v: f64) -> (ParamStore<f64>, crate::numerics::ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::scalar(v), true).unwrap();
        (s, id)
    }

    /// Gradient of `k · p`, which is `k`.
    fn linear_grad(store: &ParamStore<f64>, k: f64) -> Gradients<f64> {
        let mut g = Graph::new(Mode::Train, 0);
        let p = g.param(store, store.id("p").unwrap());
        let y = g.scale(p, k);
        g.backward(y).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut store, id) = scalar_store(1.5);
        let mut adam = AdamState::new(AdamConfig::default(), &store).unwrap();
        for _ in 0..3 {
            let grads = linear_grad(&store, 0.0);
            adam.step(&mut store, &grads).unwrap();
        }
        assert_eq!(store.get(id).item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
        let (mut store, id) = scalar_store(1.0);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut adam = AdamState::new(cfg, &store).unwrap();
        let grads = linear_grad(&store, 1.0);
        adam.step(&mut store, &grads).unwrap();
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((store.get(id).item() - want).abs() < 1e-12);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn identical_parameters_stay_identical() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", Tensor::scalar(0.3), true).unwrap();
        let b = store.insert("b", Tensor::scalar(0.3), true).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &store).unwrap();
        for step in 0..25 {
            let mut g = Graph::new(Mode::Train, 0);
            let (pa, pb) = (g.param(&store, a), g.param(&store, b));
            let sa = g.mul(pa, pa).unwrap();
            let sb = g.mul(pb, pb).unwrap();
            let s = g.add(sa, sb).unwrap();
            let y = g.scale(s, 1.0 + step as f64);
            let grads = g.backward(y).unwrap();
            adam.step(&mut store, &grads).unwrap();
            assert_eq!(store.get(a).item().to_bits(), store.get(b).item().to_bits());
        }
    }

    #[test]
    fn rejects_non_positive_learning_rate() {
        let (store, _) = scalar_store(1.0);
        let cfg = AdamConfig { lr: 0.0, ..AdamConfig::default() };
        assert!(AdamState::new(cfg, &store).is_err());
    }
}
