//! AdamW with one learning rate per parameter group.

use alloc::collections::BTreeMap;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamGroup, ParamStore};
use crate::error::Result;
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Optional global-norm gradient clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-4,
            lr_head: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: None,
        }
    }
}

impl AdamWConfig {
    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Head => self.lr_head,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Matrix,
    v: Matrix,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient entry are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Matrix>) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let clip = match c.clip_norm {
            Some(max) => {
                let norm = libm::sqrt(grads.values().map(|g| g.dot(g)).sum::<f64>());
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = self.step as i32;
        let bias1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bias2 = 1.0 - libm::pow(c.beta2, t as f64);
        for (name, grad) in grads {
            let Some(param) = store.params.get_mut(name) else { continue };
            let lr = c.lr(param.group);
            let (rows, cols) = param.value.shape();
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Matrix::zeros(rows, cols),
                v: Matrix::zeros(rows, cols),
            });
            let p = param.value.as_mut_slice();
            let m = mo.m.as_mut_slice();
            let v = mo.v.as_mut_slice();
            for (i, g) in grad.as_slice().iter().enumerate() {
                let g = g * clip;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= lr * c.weight_decay * p[i];
                p[i] -= lr * m_hat / (libm::sqrt(v_hat) + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let mut store = ParamStore::default();
        store.insert("b", ParamGroup::Backbone, Matrix::filled(1, 2, 1.0));
        store.insert("h", ParamGroup::Head, Matrix::filled(1, 2, 1.0));
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let mut grads = BTreeMap::new();
        grads.insert("b".into(), Matrix::from_rows(&[&[2.0, -3.0]]));
        grads.insert("h".into(), Matrix::from_rows(&[&[0.5, -0.5]]));
        opt.step(&mut store, &grads).unwrap();
        let b = store.get("b").unwrap();
        let h = store.get("h").unwrap();
        assert!((b[(0, 0)] - (1.0 - 1e-4)).abs() < 1e-9);
        assert!((b[(0, 1)] - (1.0 + 1e-4)).abs() < 1e-9);
        assert!((h[(0, 0)] - (1.0 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient_signal() {
        let mut store = ParamStore::default();
        store.insert("h", ParamGroup::Head, Matrix::filled(1, 1, 2.0));
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("h".into(), Matrix::zeros(1, 1));
        opt.step(&mut store, &grads).unwrap();
        assert!((store.get("h").unwrap()[(0, 0)] - 2.0 * (1.0 - 1e-3 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::default();
        store.insert("x", ParamGroup::Head, Matrix::from_rows(&[&[3.0, -2.0]]));
        let mut opt = AdamW::new(AdamWConfig {
            lr_head: 0.05,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            ..AdamWConfig::default()
        });
        for _ in 0..2000 {
            let x = store.get("x").unwrap().clone();
            let mut grads = BTreeMap::new();
            grads.insert("x".into(), x.scale(2.0));
            opt.step(&mut store, &grads).unwrap();
        }
        assert!(store.get("x").unwrap().as_slice().iter().all(|v| v.abs() < 1e-2));
    }
}
