use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::tape::ParamStore;
use super::tensor::Tensor2;

/// Adam with bias correction. Moment slots mirror the store's layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor2>,
    pub v: Vec<Tensor2>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self::with_betas(store, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor2> = store.values.iter().map(|t| Tensor2::zeros(t.rows, t.cols)).collect();
        Adam { lr, beta1, beta2, eps, t: 0, m: zeros.clone(), v: zeros }
    }

    /// Descend along `store.grads`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for ((value, grad), (m, v)) in store.values.iter_mut().zip(&store.grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for k in 0..value.data.len() {
                let g = grad.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * g;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m.data[k] / bc1;
                let v_hat = v.data[k] / bc2;
                value.data[k] -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
    }
}
