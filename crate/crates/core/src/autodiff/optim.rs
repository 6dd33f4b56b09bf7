use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{invalid, Result};

/// Adam with bias correction. Frozen or non-trainable parameters are skipped
/// entirely: their values and moments are left as they were.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        Some((self.first.get(name)?, self.second.get(name)?))
    }

    /// Overwrites the moment buffers of one parameter.
    pub fn set_moments(&mut self, name: &str, m: Vec<f64>, v: Vec<f64>) {
        self.first.insert(name.to_string(), m);
        self.second.insert(name.to_string(), v);
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        if !(self.lr > 0.0) {
            return invalid(format!("adam: learning rate must be positive, got {}", self.lr));
        }
        // Validate everything before touching any state.
        for (name, p) in params.iter() {
            if !p.updatable() {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.value.shape() {
                return invalid(format!(
                    "adam: gradient shape {:?} does not match parameter `{name}` {:?}",
                    g.shape(),
                    p.value.shape()
                ));
            }
            if !g.is_finite() {
                return invalid(format!("adam: non-finite gradient for `{name}`"));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            if !p.updatable() {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let n = g.numel();
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
