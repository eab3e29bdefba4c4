//! AdamW with decoupled weight decay and bias correction.

use super::TrainError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
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
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    decays: Vec<bool>,
    t: u64,
}

impl AdamW {
    /// `decays[i]` selects whether tensor `i` receives weight decay.
    pub fn new(config: AdamWConfig, params: &[Tensor], decays: Vec<bool>) -> Result<Self, TrainError> {
        if decays.len() != params.len() {
            return Err(TrainError::Shape(format!(
                "{} decay flags for {} tensors",
                decays.len(),
                params.len()
            )));
        }
        Ok(AdamW {
            config,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            decays,
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update: `p ← p·(1 − lr·wd)` for decayed tensors, then
    /// `p ← p − lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<(), TrainError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TrainError::Shape(format!(
                "optimizer holds {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.m[i].len() {
                return Err(TrainError::Shape(format!(
                    "tensor {i}: param {:?}, grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(self.t as f64);
        let bc2 = 1.0 - c.beta2.powf(self.t as f64);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step = (lr / bc1) as f32;
        let rbc2 = (1.0 / bc2.sqrt()) as f32;
        let eps = c.eps as f32;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let shrink = if self.decays[i] {
                (1.0 - lr * c.weight_decay) as f32
            } else {
                1.0
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *w = *w * shrink - step * *mv / (vv.sqrt() * rbc2 + eps);
            }
        }
        Ok(())
    }
}
