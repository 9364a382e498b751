//! AdamW with global-norm clipping and a warmup-cosine learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamTree;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 1e-4, min_lr: 0.0, warmup: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: 1.0 }
    }
}

impl OptimConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("{section}.{m}")));
        if !(self.lr > 0.0) {
            return err(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return err(format!("min_lr must be in [0, lr], got {}", self.min_lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("beta1/beta2 must be in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return err("eps and clip_norm must be > 0, weight_decay >= 0".into());
        }
        Ok(())
    }

    /// Linear warmup then cosine decay from `lr` to `min_lr` at `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = total.saturating_sub(self.warmup).max(1);
        let p = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

pub struct AdamW<S> {
    cfg: OptimConfig,
    m: ParamTree<S>,
    v: ParamTree<S>,
    t: usize,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: OptimConfig, params: &ParamTree<S>) -> Self {
        Self { cfg, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    /// Clips `grads` to the global norm limit, then applies one update at
    /// learning rate `lr`. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamTree<S>, grads: &mut ParamTree<S>, lr: f64) -> Result<f64> {
        grads.check_finite()?;
        let norm = grads.global_norm().as_f64();
        if norm > self.cfg.clip_norm {
            let s = S::lit(self.cfg.clip_norm / norm);
            for (_, g) in grads.iter_mut() {
                g.scale_assign(s);
            }
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = S::lit(1.0 / (1.0 - b1.powi(self.t as i32)));
        let c2 = S::lit(1.0 / (1.0 - b2.powi(self.t as i32)));
        let (b1, b2, eps) = (S::lit(b1), S::lit(b2), S::lit(self.cfg.eps));
        let lr_s = S::lit(lr);
        let decay = S::lit(1.0 - lr * self.cfg.weight_decay);
        let one = S::one();
        for (path, p) in params.iter_mut() {
            let g = grads.get(path)?;
            let m = self.m.get_mut(path)?;
            for (mv, &gv) in m.data_mut().iter_mut().zip(g.data()) {
                *mv = b1 * *mv + (one - b1) * gv;
            }
            let v = self.v.get_mut(path)?;
            for (vv, &gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = b2 * *vv + (one - b2) * gv * gv;
            }
            let (m, v) = (self.m.get(path)?, self.v.get(path)?);
            for ((pv, &mv), &vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *pv = *pv * decay - lr_s * (mv * c1) / ((vv * c2).sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
