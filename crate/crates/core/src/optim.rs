//! Adam with bias correction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer state. Moment buffers exist exactly for the tensors that were
/// trainable when the state was created.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    moments: Vec<Option<Moments>>,
    step: u64,
}

impl AdamState {
    pub fn new<T: Scalar>(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let moments = params
            .iter()
            .map(|p| {
                p.is_trainable().then(|| Moments {
                    first: vec![0.0; p.len()],
                    second: vec![0.0; p.len()],
                })
            })
            .collect();
        Self {
            config,
            moments,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn has_moments(&self, index: usize) -> bool {
        matches!(self.moments.get(index), Some(Some(_)))
    }

    /// One Adam update over every trainable tensor, using `lr` in place of
    /// the configured rate. Gradient buffers are zeroed afterwards.
    pub fn step_with_lr<T: Scalar>(&mut self, params: &mut [Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.moments.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, got {}",
                self.moments.len(),
                params.len()
            )));
        }
        for (i, (p, m)) in params.iter().zip(&self.moments).enumerate() {
            match (p.is_trainable(), m.is_some()) {
                (true, false) | (false, true) => {
                    return Err(Error::contract(format!(
                        "trainability of tensor {i} changed since the optimizer was created"
                    )))
                }
                (true, true) if p.grad().is_none() => {
                    return Err(Error::contract(format!("trainable tensor {i} has no gradient")))
                }
                _ => {}
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - Float::powi(beta1, t);
        let bc2 = 1.0 - Float::powi(beta2, t);
        for (p, m) in params.iter_mut().zip(self.moments.iter_mut()) {
            let Some(m) = m else { continue };
            let (grad, data) = p.grad_and_data_mut();
            let grad = grad.expect("checked above");
            for j in 0..data.len() {
                let g = grad[j].as_f64();
                m.first[j] = beta1 * m.first[j] + (1.0 - beta1) * g;
                m.second[j] = beta2 * m.second[j] + (1.0 - beta2) * g * g;
                let mhat = m.first[j] / bc1;
                let vhat = m.second[j] / bc2;
                let updated = data[j].as_f64() - lr * mhat / (Float::sqrt(vhat) + eps);
                data[j] = T::from_f64_lossy(updated);
                grad[j] = T::zero();
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("adam_step"));
            }
        }
        Ok(())
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [Tensor<T>]) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, lr)
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
        .sum();
    let norm = Float::sqrt(total);
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64_lossy(max_norm / norm);
        for p in params.iter_mut() {
            if let (Some(g), _) = p.grad_and_data_mut() {
                g.iter_mut().for_each(|v| *v = *v * scale);
            }
        }
    }
    norm
}
