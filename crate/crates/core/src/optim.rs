//! Adam optimizer.

use alloc::vec;
use alloc::vec::Vec;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    /// First and second moment estimates, one buffer per parameter.
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    /// One bias-corrected update. Parameters without a gradient are left
    /// untouched.
    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Option<&[T]>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Invalid("optimizer state does not match the parameter list".into()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let lr_t = c.learning_rate * (1.0 - c.beta2.powf(t)).sqrt() / (1.0 - c.beta1.powf(t));
        let (b1, b2, eps, lr) = (T::of(c.beta1), T::of(c.beta2), T::of(c.epsilon), T::of(lr_t));
        let (r1, r2) = (T::one() - b1, T::one() - b2);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.len() != p.len() {
                return Err(Error::LengthMismatch {
                    shape: p.shape().to_vec(),
                    len: g.len(),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + r1 * gi;
                *vi = b2 * *vi + r2 * gi * gi;
                *w -= lr * *mi / (vi.sqrt() + eps);
            }
        }
        Ok(())
    }
}
