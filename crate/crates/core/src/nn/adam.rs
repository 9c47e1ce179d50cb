use serde::{Deserialize, Serialize};

use super::{NnError, ParamSet, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adaptive-moment optimizer state for one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> OptState<T> {
    pub fn new<P: ParamSet<T>>(config: AdamConfig, params: &P) -> Self {
        let zeros: Vec<Vec<T>> = params
            .tensors()
            .iter()
            .map(|t| vec![T::zero(); t.len()])
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One bias-corrected update of `params` against `grads`.
    pub fn step<P: ParamSet<T>>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g = grads.tensors();
        let mut p = params.tensors_mut();
        if g.len() != p.len() || g.len() != self.first.len() {
            return Err(NnError::Shape {
                context: "opt_step",
                expected: vec![self.first.len()],
                got: vec![g.len()],
            });
        }
        for (i, (pt, gt)) in p.iter().zip(&g).enumerate() {
            if pt.shape != gt.shape || pt.len() != self.first[i].len() {
                return Err(NnError::Shape {
                    context: "opt_step tensor",
                    expected: pt.shape.clone(),
                    got: gt.shape.clone(),
                });
            }
        }
        if cfg!(debug_assertions) && !grads.all_finite() {
            return Err(NnError::NonFinite("gradient"));
        }
        self.step += 1;
        let c = self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        for (i, (pt, gt)) in p.iter_mut().zip(&g).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (j, (w, &gr)) in pt.data.iter_mut().zip(&gt.data).enumerate() {
                m[j] = b1 * m[j] + (one - b1) * gr;
                v[j] = b2 * v[j] + (one - b2) * gr * gr;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Real, P: ParamSet<T>>(grads: &mut P, max_norm: T) -> T {
    let n = grads.global_norm();
    if n > max_norm && n > T::zero() {
        grads.scale(max_norm / n);
    }
    n
}
