//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `lr_min + (lr_max - lr_min) (1 + cos(pi t / T)) / 2`, clamped to `lr_min`
/// past the end.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 || t >= total {
        return lr_min;
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update at learning rate `lr`:
    /// `p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)`.
    ///
    /// `grads` is indexed like the store; a missing entry is an error naming
    /// the parameter.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &[Option<&Tensor<f32>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}, got {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let ids: Vec<_> = params.ids().collect();
        for &id in &ids {
            let g = grads[id.index()].ok_or_else(|| Error::MissingGradient(params.name(id).to_string()))?;
            if g.shape() != params.get(id).shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("gradient for `{}` has shape {:?}", params.name(id), g.shape()),
                ));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in ids {
            let i = id.index();
            let g = grads[i].expect("checked above").data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g[j] as f64;
                let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * gj;
                let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                let pj = p[j] as f64;
                p[j] = (pj - lr * c.weight_decay * pj - lr * m_hat / (v_hat.sqrt() + c.eps)) as f32;
            }
        }
        Ok(())
    }
}
