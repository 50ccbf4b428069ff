//! Adaptive-moment optimizer with global-norm gradient clipping.
//!
//! Exact update rule, so independent implementations can match bitwise:
//! the raw gradient is first clipped in global norm
//! (`g <- g * min(1, clip/‖g‖₂)`), then
//! `m <- β₁ m + (1-β₁) g`, `v <- β₂ v + (1-β₂) g²`,
//! `m̂ = m/(1-β₁ᵗ)`, `v̂ = v/(1-β₂ᵗ)`,
//! `θ <- θ - lr · m̂/(√v̂ + ε)` with `t` counting updates from 1.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::reduce::tree_sum;
use crate::scalar::Scalar;

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Global-norm gradient clip.
    pub clip: f64,
    pub iterations: usize,
    /// Minibatch size (transitions per step).
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            clip: 5.0,
            iterations: 100,
            batch_size: 500,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.clip <= 0.0 {
            return Err(Error::config("gradient clip must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("moment decay rates must lie in [0, 1)"));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::config("epsilon must be positive"));
        }
        Ok(())
    }
}

/// Clip a gradient in global L2 norm; returns the pre-clip norm.
pub fn clip_global_norm<F: Scalar>(grad: &mut [F], clip: F) -> F {
    let sq: Vec<F> = grad.iter().map(|&g| g * g).collect();
    let norm = tree_sum(&sq).sqrt();
    if norm > clip && norm > F::zero() {
        let scale = clip / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// Adam state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    lr: F,
    beta1: F,
    beta2: F,
    epsilon: F,
    m: Vec<F>,
    v: Vec<F>,
    t: u32,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: &OptimizerConfig, n_params: usize) -> Self {
        Adam {
            lr: F::c(cfg.learning_rate),
            beta1: F::c(cfg.beta1),
            beta2: F::c(cfg.beta2),
            epsilon: F::c(cfg.epsilon),
            m: vec![F::zero(); n_params],
            v: vec![F::zero(); n_params],
            t: 0,
        }
    }

    /// One update with an already-clipped gradient.
    pub fn step(&mut self, params: &mut [F], grad: &[F]) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let one = F::one();
        let bc1 = one - self.beta1.powi(self.t as i32);
        let bc2 = one - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}
