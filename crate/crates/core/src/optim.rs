//! Adaptive-moment optimiser with linear warmup and global-norm clipping.

use std::collections::BTreeMap;

use crate::error::{config_err, BstError, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::{Gradients, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Cosine decay to `lr · min_lr_ratio` over this many steps; 0 keeps the
    /// rate constant after warmup.
    pub total_steps: usize,
    pub min_lr_ratio: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.0,
            warmup_steps: 100,
            total_steps: 0,
            min_lr_ratio: 0.1,
            clip_norm: 1.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm >= 0.0
            && (0.0..=1.0).contains(&self.min_lr_ratio);
        if ok {
            Ok(())
        } else {
            Err(config_err(format!("invalid optimiser settings {self:?}")))
        }
    }

    /// Step size at 0-based `step`.
    pub fn rate(&self, step: usize) -> f64 {
        let s = (step + 1) as f64;
        if step < self.warmup_steps {
            return self.lr * s / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return self.lr;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }
}

pub struct Adam<T: Real = f64> {
    pub cfg: AdamConfig,
    step: usize,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Clips, then applies one update. Returns the gradient norm before
    /// clipping.
    pub fn step(&mut self, params: &mut ParamStore<T>, mut grads: Gradients<T>) -> Result<f64> {
        let norm = grads.global_norm().to_f64();
        if !norm.is_finite() {
            return Err(BstError::Divergence(format!("gradient norm is {norm} at step {}", self.step)));
        }
        if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            grads.scale(T::from_f64(self.cfg.clip_norm / norm));
        }
        let c = &self.cfg;
        let t = (self.step + 1) as i32;
        let lr = c.rate(self.step);
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (a, eps, wd) = (T::from_f64(lr / bc1), T::from_f64(c.eps), T::from_f64(lr * c.weight_decay));
        let rbc2 = T::from_f64(1.0 / bc2);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let it = p.data_mut().iter_mut().zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut())).zip(g.data());
            for ((x, (m, v)), &g) in it {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *x -= a * *m / ((*v * rbc2).sqrt() + eps) + wd * *x;
            }
        }
        self.step += 1;
        Ok(norm)
    }
}
