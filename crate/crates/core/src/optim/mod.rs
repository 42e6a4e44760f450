//! Nesterov SGD with classic (coupled) L2 weight decay.
//!
//! Per parameter: `g = grad + wd * p; v = mu * v + g; p -= lr * (g + mu * v)`.

use serde::{Deserialize, Serialize};

use crate::arch::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Skip weight decay on batch-norm gamma and beta.
    pub exclude_bn_from_decay: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.001,
            exclude_bn_from_decay: false,
        }
    }
}

/// Optimizer state: one velocity buffer per parameter slot.
#[derive(Clone, Debug)]
pub struct Sgd<T: Float = f32> {
    pub config: SgdConfig,
    velocity: Vec<Tensor<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(config: SgdConfig, params: &ParamStore<T>) -> Self {
        Self {
            config,
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn velocity(&self, slot: usize) -> &Tensor<T> {
        &self.velocity[slot]
    }

    pub fn set_velocity(&mut self, slot: usize, v: Tensor<T>) -> Result<()> {
        let cur = self
            .velocity
            .get_mut(slot)
            .ok_or_else(|| Error::Optim(format!("no velocity slot {slot}")))?;
        if cur.shape() != v.shape() {
            return Err(Error::Optim(format!(
                "velocity shape {:?} does not match parameter shape {:?}",
                v.shape(),
                cur.shape()
            )));
        }
        *cur = v;
        Ok(())
    }

    /// Applies one update to every parameter and clears the gradients.
    ///
    /// Every parameter must hold a gradient; nothing is updated otherwise.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::Optim(format!(
                "optimizer tracks {} parameters, store has {}",
                self.velocity.len(),
                params.len()
            )));
        }
        if let Some(p) = params.iter().find(|p| p.value.grad().is_none()) {
            return Err(Error::Optim(format!("parameter {} has no gradient", p.name)));
        }
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
            exclude_bn_from_decay,
        } = self.config;
        let (lr, mu) = (T::of(lr), T::of(momentum));
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let wd = if exclude_bn_from_decay && p.kind.is_batchnorm() {
                T::zero()
            } else {
                T::of(weight_decay)
            };
            let value = p.value_mut();
            let grad = value.take_grad().unwrap_or_default();
            for ((x, vel), g) in value.data_mut().iter_mut().zip(v.data_mut()).zip(grad) {
                let g = g + wd * *x;
                *vel = mu * *vel + g;
                *x -= lr * (g + mu * *vel);
            }
        }
        Ok(())
    }
}
