use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_accum_steps: usize,
    /// Used to derive the step budget when no explicit step count is set.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1.5e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_accum_steps: 1,
            epochs: 1,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return bad("weight_decay must be >= 0 and eps > 0".into());
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return bad("batch_size and grad_accum_steps must be positive".into());
        }
        Ok(())
    }
}

/// AdamW moments. Weight decay is decoupled and applies to matrices and
/// higher-rank tensors only; biases, norms and vectors are not decayed.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = params.values().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f32>], cfg: &OptimizerConfig) -> Result<(), TrainError> {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        for (id, g) in params.ids().zip(grads) {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    param: params.name(id).to_string(),
                    index: i,
                });
            }
        }
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let lr = cfg.lr as f32;
        let (c1, c2, eps) = (c1 as f32, c2 as f32, cfg.eps as f32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let decay = if params.get(id).rank() >= 2 {
                (cfg.lr * cfg.weight_decay) as f32
            } else {
                0.0
            };
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= decay * p[k];
                p[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ecamp_autodiff::Tensor;

    fn scalar_store(v: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(vec![1], vec![v]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(&[2, 2], 0.5f32));
        let before = s.clone();
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&s);
        opt.step(&mut s, &[vec![0.0; 4]], &cfg).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        let cfg = OptimizerConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        AdamW::new(&s).step(&mut s, &[vec![1.0]], &cfg).unwrap();
        assert!((s.values()[0].data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut s = scalar_store(1.0);
        let err = AdamW::new(&s)
            .step(&mut s, &[vec![f32::NAN]], &OptimizerConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("`p`"), "{err}");
    }

    #[test]
    fn quadratic_bowl_descends() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::new(vec![2, 1], vec![3.0f32, -2.0]).unwrap());
        let cfg = OptimizerConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(&s);
        let loss = |s: &ParamStore| s.values()[0].data().iter().map(|v| v * v).sum::<f32>();
        let mut last = loss(&s);
        for _ in 0..10 {
            let g: Vec<f32> = s.values()[0].data().iter().map(|v| 2.0 * v).collect();
            opt.step(&mut s, &[g], &cfg).unwrap();
            let l = loss(&s);
            assert!(l < last);
            last = l;
        }
    }
}
