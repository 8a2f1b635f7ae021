use std::f64::consts::PI;

use super::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Adam hyper-parameters. Weight decay is decoupled: it shrinks the value
/// directly instead of entering the gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0004 }
    }
}

/// Moment buffers, one pair per parameter in set order.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update at learning rate `lr`; gradients are
/// zeroed afterwards.
pub fn adam_step<T: Real>(params: &mut ParamSet<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::config("optimizer state does not match the parameter set"));
    }
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::config(format!("parameter {} has no gradient", p.name)));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let step_size = T::from_f64_lossy(lr / bc1);
    let sqrt_bc2 = T::from_f64_lossy(bc2.sqrt());
    let eps = T::from_f64_lossy(c.eps);
    let decay = T::one() - T::from_f64_lossy(lr * c.weight_decay);

    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.grad.as_mut().expect("checked above");
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((w, g), mi), vi) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *w = *w * decay;
            *mi = b1 * *mi + one_b1 * *g;
            *vi = b2 * *vi + one_b2 * *g * *g;
            *w = *w - step_size * *mi / ((*vi).sqrt() / sqrt_bc2 + eps);
        }
        grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }
    Ok(())
}

/// Cosine annealing with warm restarts: cycle `i` lasts `t0·t_multⁱ` epochs
/// and decays from `lr0` to `eta_min`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineWarmRestarts {
    pub lr0: f64,
    pub eta_min: f64,
    pub t0: f64,
    pub t_mult: f64,
}

impl Default for CosineWarmRestarts {
    fn default() -> Self {
        CosineWarmRestarts { lr0: 1e-4, eta_min: 1e-6, t0: 10.0, t_mult: 2.0 }
    }
}

impl CosineWarmRestarts {
    pub fn with_lr0(lr0: f64) -> Self {
        CosineWarmRestarts { lr0, ..Self::default() }
    }

    /// Learning rate at a (possibly fractional) epoch.
    pub fn lr(&self, epoch: f64) -> f64 {
        let (t, period) = self.position(epoch.max(0.0));
        self.eta_min + 0.5 * (self.lr0 - self.eta_min) * (1.0 + (PI * t / period).cos())
    }

    /// Epochs at which a new cycle begins, below `limit`.
    pub fn restarts(&self, limit: f64) -> Vec<f64> {
        let mut out = Vec::new();
        let (mut start, mut period) = (0.0, self.t0);
        while start < limit {
            out.push(start);
            start += period;
            period *= self.t_mult;
        }
        out
    }

    fn position(&self, epoch: f64) -> (f64, f64) {
        let (mut start, mut period) = (0.0, self.t0);
        while epoch >= start + period {
            start += period;
            period *= self.t_mult;
        }
        (epoch - start, period)
    }
}
