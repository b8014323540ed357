//! Adam with decoupled weight decay.

use alloc::format;
use alloc::vec::Vec;

use crate::tape::ParamStore;
use crate::tensor::Tensor2;
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay `λ`; parameters are scaled by `1 − lr·λ`
    /// before each step.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    m: Vec<Tensor2<T>>,
    v: Vec<Tensor2<T>>,
    t: u32,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| Tensor2::zeros(e.value.rows(), e.value.cols()))
                .collect()
        };
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// Applies one update from the accumulated gradients of every unfrozen
    /// parameter. Gradients are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::shape(
                "adam state",
                (self.m.len(), 1),
                (store.len(), 1),
            ));
        }
        for e in store.entries() {
            if !e.frozen && !e.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", e.name)));
            }
        }
        self.t += 1;
        let c = &self.cfg;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - libm::pow(c.beta1, self.t as f64));
        let bc2 = T::from_f64(1.0 - libm::pow(c.beta2, self.t as f64));
        let decay = T::from_f64(1.0 - lr * c.weight_decay);
        let (lr, eps) = (T::from_f64(lr), T::from_f64(c.eps));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let entry = store.entry_mut(id);
            if entry.frozen {
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let grad = entry.grad.data();
            let value = entry.value.data_mut();
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                value[j] = value[j] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
