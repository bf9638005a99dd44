//! AdamW with decoupled weight decay and bias correction.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        AdamW {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update. Parameters without a gradient are treated as having
    /// a zero gradient. A non-finite gradient aborts before anything changes.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if let Some(g) = g {
                if g.shape() != params.get(id).shape() {
                    return Err(Error::shape(
                        "adamw",
                        format!("gradient {:?} for `{}` {:?}", g.shape(), params.name(id), params.get(id).shape()),
                    ));
                }
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient { name: params.name(id).to_string() });
                }
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let f = T::from_f64_lossy;
        let (b1, b2, eps) = (f(c.beta1), f(c.beta2), f(c.eps));
        let (one_b1, one_b2) = (f(1.0 - c.beta1), f(1.0 - c.beta2));
        let decay = f(1.0 - c.lr * c.weight_decay);
        let step_size = f(c.lr / bc1);
        let sqrt_bc2 = f(bc2.sqrt());
        for ((id, g), (m, v)) in params.ids().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let p = params.get_mut(id).data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.as_ref().map_or(T::zero(), |g| g.data()[i]);
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                p[i] = p[i] * decay - step_size * m[i] / (v[i].sqrt() / sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}
