//! Adam with bias correction, and the learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter moments and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.values().iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        Self { config, m: zeros(), v: zeros(), step: 0 }
    }

    /// One bias-corrected update: `p -= lr·m̂ / (√v̂ + eps)`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return shape_err("adam", format!("{} gradients / {} moments for {} parameters", grads.len(), self.m.len(), params.len()));
        }
        for ((p, g), m) in params.values().iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return shape_err("adam", format!("parameter {:?}, gradient {:?}, moment {:?}", p.shape(), g.shape(), m.shape()));
            }
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Config(format!("learning rate must be finite and nonnegative, got {lr}")));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
        let (ob1, ob2) = (T::from_f64_lossy(1.0 - beta1), T::from_f64_lossy(1.0 - beta2));
        let (c1, c2) = (T::from_f64_lossy(c1), T::from_f64_lossy(c2));
        let (lr, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(eps));
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((p, &g), m), v) in it {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Constant `max_lr` for epochs `[0, E/2)`, then linear decay reaching 0 at `E`.
pub fn lr_at(epoch: usize, total_epochs: usize, max_lr: f64) -> f64 {
    let e = total_epochs as f64;
    let x = epoch as f64;
    if 2.0 * x < e {
        max_lr
    } else if x >= e {
        0.0
    } else {
        max_lr * ((e - x) / (e / 2.0))
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let k = T::from_f64_lossy(max_norm / norm);
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}
