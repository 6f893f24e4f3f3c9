//! AdamW with decoupled weight decay and a linear warm-up / linear decay schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Optimizer state for one parameter group, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that requires a gradient, then
    /// clears their gradients. Frozen parameters are skipped untouched.
    ///
    /// Fails without modifying anything if a trainable parameter lacks a
    /// gradient.
    pub fn step<'a, I>(&mut self, params: I, lr: f64) -> Result<()>
    where
        I: IntoIterator<Item = (String, &'a mut Tensor<T>)>,
    {
        let mut live: Vec<(String, &'a mut Tensor<T>)> =
            params.into_iter().filter(|(_, p)| p.requires_grad()).collect();
        for (name, p) in &live {
            match &p.grad {
                None => return Err(Error::MissingGrad(name.clone())),
                Some(g) if g.len() != p.numel() => {
                    return Err(shape_err("adamw", format!("gradient of `{}` has wrong length", name)))
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let lr_t = T::of(lr);
        let decay = T::of(lr * c.weight_decay);
        let eps = T::of(c.eps);
        for (name, p) in live.iter_mut() {
            let g = p.grad.take().expect("checked above");
            let st = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); g.len()],
                v: vec![T::zero(); g.len()],
            });
            if st.m.len() != g.len() {
                return Err(shape_err("adamw", format!("moment buffer for `{}` changed size", name)));
            }
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i];
                *w = *w - decay * *w;
                st.m[i] = b1 * st.m[i] + (T::one() - b1) * gi;
                st.v[i] = b2 * st.v[i] + (T::one() - b2) * gi * gi;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                *w = *w - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warm-up followed by linear decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_steps: u64,
    pub warmup_fraction: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, total_steps: u64, warmup_fraction: f64) -> Self {
        LrSchedule {
            base_lr,
            total_steps,
            warmup_fraction,
        }
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).ceil() as u64
    }

    /// Learning rate for the update with zero-based index `step`.
    pub fn lr(&self, step: u64) -> f64 {
        let warm = self.warmup_steps();
        if step >= self.total_steps {
            0.0
        } else if step < warm {
            self.base_lr * (step + 1) as f64 / warm as f64
        } else {
            self.base_lr * (self.total_steps - step) as f64 / (self.total_steps - warm) as f64
        }
    }
}
