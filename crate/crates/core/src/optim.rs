//! First-order optimizers: Adam for the recurrent cell, SGD with momentum for
//! the per-frame backbone.

use crate::error::{GrfpError, Result};
use crate::tensor::{Real, Tensor};

/// A fixed, ordered collection of learnable tensors.
pub trait ParamSet<T> {
    fn params(&self) -> Vec<&Tensor<T>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;
}

/// Result of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held NaN or ±∞; parameters and state were left untouched.
    SkippedNonFinite,
}

fn check_pairs<T: Real>(params: &[&mut Tensor<T>], grads: &[Tensor<T>], state: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(GrfpError::contract(format!(
            "optimizer tracks {} tensors, got {} parameters and {} gradients",
            state.len(),
            params.len(),
            grads.len()
        )));
    }
    for ((p, g), s) in params.iter().zip(grads).zip(state) {
        if p.shape() != g.shape() {
            return Err(GrfpError::shape("optimizer gradient", p.shape(), g.shape()));
        }
        if p.shape() != s.shape() {
            return Err(GrfpError::shape("optimizer state", p.shape(), s.shape()));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// β1 = 0.95, β2 = 0.99, learning rate 2·10⁻⁵, ε = 10⁻⁸.
    fn default() -> Self {
        AdamConfig {
            lr: 2e-5,
            beta1: 0.95,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for every tensor of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[&Tensor<T>]) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<StepOutcome> {
        check_pairs(params, grads, &self.m)?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let bc1 = T::lit(1.0 - beta1.powi(self.t as i32));
        let bc2 = T::lit(1.0 - beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(lr), T::lit(eps));
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((pv, &g), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(grads[k].data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * g;
                *vv = b2 * *vv + (T::one() - b2) * g * g;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentumConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for MomentumConfig {
    /// Momentum 0.95; learning rate 10⁻⁷ for an unnormalized loss on 64×64 frames.
    fn default() -> Self {
        MomentumConfig {
            lr: 1e-7,
            momentum: 0.95,
        }
    }
}

/// Heavy-ball velocity `v ← μ v − lr g`, `p ← p + v`.
#[derive(Clone, Debug)]
pub struct MomentumState<T> {
    pub config: MomentumConfig,
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Real> MomentumState<T> {
    pub fn new(config: MomentumConfig, params: &[&Tensor<T>]) -> Self {
        MomentumState {
            config,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<StepOutcome> {
        check_pairs(params, grads, &self.velocity)?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Ok(StepOutcome::SkippedNonFinite);
        }
        let (mu, lr) = (T::lit(self.config.momentum), T::lit(self.config.lr));
        for (k, p) in params.iter_mut().enumerate() {
            for ((pv, &g), vel) in p
                .data_mut()
                .iter_mut()
                .zip(grads[k].data())
                .zip(self.velocity[k].data_mut())
            {
                *vel = mu * *vel - lr * g;
                *pv += *vel;
            }
        }
        Ok(StepOutcome::Applied)
    }
}
