//! Adam with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(ps: &ParamStore) -> Self {
        let z: Vec<Vec<f64>> = ps.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            t: 0,
            m: z.clone(),
            v: z,
        }
    }

    fn check(&self, ps: &ParamStore, g: &Grads) -> Result<()> {
        let shapes = ps.tensors.iter().map(|t| t.data.len());
        for (i, n) in shapes.enumerate() {
            let ok = g.0.get(i).map(|x| x.len()) == Some(n)
                && self.m.get(i).map(|x| x.len()) == Some(n)
                && self.v.get(i).map(|x| x.len()) == Some(n);
            if !ok {
                return Err(Error::InvalidInput(format!("optimizer shape mismatch at tensor {i}")));
            }
        }
        if g.0.len() != ps.tensors.len() || self.m.len() != ps.tensors.len() {
            return Err(Error::DimensionMismatch {
                expected: ps.tensors.len(),
                got: g.0.len(),
            });
        }
        Ok(())
    }

    pub fn step(&mut self, ps: &mut ParamStore, g: &Grads, cfg: &AdamConfig) -> Result<()> {
        self.check(ps, g)?;
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, tensor) in ps.tensors.iter_mut().enumerate() {
            let (m, v, gi) = (&mut self.m[i], &mut self.v[i], &g.0[i]);
            for (j, p) in tensor.data.iter_mut().enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gi[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gi[j] * gi[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *p -= cfg.lr * cfg.weight_decay * *p;
                *p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Rescale `g` so its global norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_global_norm(g: &mut Grads, max_norm: f64) -> f64 {
    let n = g.global_norm();
    if n > max_norm && n > 0.0 {
        g.scale(max_norm / n);
    }
    n
}
