//! Noise schedules, per-frame forward noising, the diffusion-forcing loss,
//! the ancestral reverse update and classifier-free guidance.
//!
//! Levels are 1-based for the per-step arrays: step `k` moves a latent from
//! level `k` to level `k - 1` using `alpha(k)`, `alpha_bar(k)` and `sigma(k)`.
//! Level 0 is the clean latent (`alpha_bar(0) = 1`).

use serde::{Deserialize, Serialize};

use crate::dit::{drop_condition, forward_graph, make_null_condition, DitParams, ForwardLayout, TextCondition};
use crate::error::{Error, Result};
use crate::nn::{Bound, Graph, Tensor, Var};
use crate::rng::{DrawKind, RngKey};
use crate::scalar::Scalar;

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 2e-2;
const COSINE_OFFSET: f64 = 8e-3;
const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `K + 1` entries, `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Training level the denoiser is conditioned on for each level `0..=K`.
    pub index_map: Vec<usize>,
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.sigma[k - 1]
    }

    /// Training-time level for `k`.
    pub fn train_level(&self, k: usize) -> usize {
        self.index_map[k]
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.steps();
        let bad = |m: String| Err(Error::Schedule(m));
        if k == 0 || self.alpha_bar.len() != k + 1 || self.sigma.len() != k || self.index_map.len() != k + 1 {
            return bad(format!("inconsistent lengths for K = {k}"));
        }
        if self.alpha_bar[0] != 1.0 {
            return bad(format!("alpha_bar[0] = {}", self.alpha_bar[0]));
        }
        for i in 1..=k {
            if !(self.alpha_bar[i] < self.alpha_bar[i - 1]) {
                return bad(format!("alpha_bar not decreasing at {i}"));
            }
            if !(self.alpha[i - 1] > 0.0 && self.alpha[i - 1] < 1.0) {
                return bad(format!("alpha[{i}] = {} outside (0, 1)", self.alpha[i - 1]));
            }
            if !(self.sigma[i - 1] >= 0.0) {
                return bad(format!("sigma[{i}] negative"));
            }
        }
        if self.sigma[0] != 0.0 {
            return bad("sigma at the final step must be 0".into());
        }
        Ok(())
    }

    fn from_alpha_bar(kind: ScheduleKind, alpha_bar: Vec<f64>, index_map: Vec<usize>) -> Self {
        let k = alpha_bar.len() - 1;
        let alpha: Vec<f64> = (1..=k).map(|i| alpha_bar[i] / alpha_bar[i - 1]).collect();
        let beta: Vec<f64> = alpha.iter().map(|a| 1.0 - a).collect();
        let mut sigma: Vec<f64> = beta.iter().map(|b| b.sqrt()).collect();
        sigma[0] = 0.0;
        Self { kind, beta, alpha, alpha_bar, sigma, index_map }
    }
}

/// Builds a `K`-step schedule.
///
/// Linear: `beta` from 1e-4 to 2e-2. Cosine: squared-cosine `alpha_bar`
/// with offset 8e-3 and `beta` capped at 0.999. In both, `sigma_k = sqrt(beta_k)`
/// except the last denoising step, where it is 0.
pub fn build_schedule(k: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if k == 0 {
        return Err(Error::Schedule("K must be >= 1".into()));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..k)
            .map(|i| {
                let f = if k == 1 { 0.0 } else { i as f64 / (k - 1) as f64 };
                LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * f
            })
            .collect(),
        ScheduleKind::Cosine => {
            let f = |i: usize| {
                let x = (i as f64 / k as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            (1..=k).map(|i| (1.0 - f(i) / f(i - 1)).min(COSINE_MAX_BETA)).collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(k + 1);
    alpha_bar.push(1.0);
    for b in &beta {
        let last = *alpha_bar.last().expect("non-empty");
        alpha_bar.push(last * (1.0 - b));
    }
    let s = DiffusionSchedule::from_alpha_bar(kind, alpha_bar, (0..=k).collect());
    s.validate()?;
    Ok(s)
}

/// Keeps `k_infer` evenly spaced levels of `s` (level `j` maps to training
/// level `round(j * K / k_infer)`) and recomputes the per-step coefficients
/// from consecutive retained `alpha_bar` values.
pub fn subsample_schedule(s: &DiffusionSchedule, k_infer: usize) -> Result<DiffusionSchedule> {
    let k = s.steps();
    if k_infer == 0 || k_infer > k {
        return Err(Error::Schedule(format!("inference steps {k_infer} outside [1, {k}]")));
    }
    let idx: Vec<usize> =
        (0..=k_infer).map(|j| ((j * k) as f64 / k_infer as f64).round() as usize).collect();
    let alpha_bar = idx.iter().map(|&i| s.alpha_bar[i]).collect();
    let index_map = idx.iter().map(|&i| s.index_map[i]).collect();
    let out = DiffusionSchedule::from_alpha_bar(s.kind, alpha_bar, index_map);
    out.validate()?;
    Ok(out)
}

fn check_levels(levels: &[usize], max: usize) -> Result<()> {
    match levels.iter().position(|&k| k > max) {
        Some(frame) => Err(Error::LevelOutOfRange { frame, level: levels[frame], max }),
        None => Ok(()),
    }
}

/// Per-frame noising `z~_t = sqrt(ab_{k_t}) z_t + sqrt(1 - ab_{k_t}) eps_t`.
/// `eps_t` comes from `key.frame(t).step(k_t)`. Returns `(z~, eps)`.
pub fn forward_diffuse<S: Scalar>(
    z: &Tensor<S>,
    levels: &[usize],
    s: &DiffusionSchedule,
    key: RngKey,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if levels.len() != z.rows() {
        return Err(Error::Shape(format!("{} levels for {} frames", levels.len(), z.rows())));
    }
    check_levels(levels, s.steps())?;
    let d = z.cols();
    let mut zt = Tensor::zeros(z.rows(), d);
    let mut eps = Tensor::zeros(z.rows(), d);
    for (t, &k) in levels.iter().enumerate() {
        let e: Vec<S> = key.frame(t).step(k).normals(d);
        let ab = s.alpha_bar(k);
        let (a, b) = (S::lit(ab.sqrt()), S::lit((1.0 - ab).sqrt()));
        for ((o, &zv), &ev) in zt.row_mut(t).iter_mut().zip(z.row(t)).zip(&e) {
            *o = a * zv + b * ev;
        }
        eps.row_mut(t).copy_from_slice(&e);
    }
    Ok((zt, eps))
}

/// Ancestral update from level `k` to `k - 1`:
/// `(z - (1 - a_k) / sqrt(1 - ab_k) * eps_hat) / sqrt(a_k) + sigma_k * w`,
/// with `w` drawn from `key` when `sigma_k > 0`.
pub fn reverse_step<S: Scalar>(
    z: &Tensor<S>,
    eps_hat: &Tensor<S>,
    k: usize,
    s: &DiffusionSchedule,
    key: RngKey,
) -> Result<Tensor<S>> {
    if k == 0 || k > s.steps() {
        return Err(Error::Schedule(format!("reverse step from level {k} outside [1, {}]", s.steps())));
    }
    if z.shape() != eps_hat.shape() {
        return Err(Error::Shape(format!("reverse_step: {:?} vs {:?}", z.shape(), eps_hat.shape())));
    }
    let (a, ab, sig) = (s.alpha(k), s.alpha_bar(k), s.sigma(k));
    let inv = S::lit(1.0 / a.sqrt());
    let c = S::lit((1.0 - a) / (1.0 - ab).sqrt());
    let mut out = z.zip_map(eps_hat, |zv, e| inv * (zv - c * e));
    if sig > 0.0 {
        let w: Vec<S> = key.normals(z.len());
        let sig = S::lit(sig);
        for (o, w) in out.data_mut().iter_mut().zip(w) {
            *o += sig * w;
        }
    }
    Ok(out)
}

/// `eps_uncond + scale * (eps_cond - eps_uncond)`.
pub fn cfg_combine<S: Scalar>(eps_cond: &Tensor<S>, eps_uncond: &Tensor<S>, scale: f64) -> Result<Tensor<S>> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::Shape(format!("cfg: {:?} vs {:?}", eps_cond.shape(), eps_uncond.shape())));
    }
    let s = S::lit(scale);
    Ok(eps_cond.zip_map(eps_uncond, |c, u| u + s * (c - u)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub cond_drop: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { steps: 1000, schedule: ScheduleKind::Linear, cond_drop: 0.1 }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("diffusion.steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_drop) {
            return Err(Error::Config(format!("diffusion.cond_drop must be in [0, 1], got {}", self.cond_drop)));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<DiffusionSchedule> {
        build_schedule(self.steps, self.schedule)
    }
}

/// Per-frame levels shaped like a sampler state: `clamp(k0 + (t - t0) * lag, 0, max)`,
/// a clean prefix followed by a rising ramp. Half the draws use `lag = max`
/// (one noisy frame after clean context, as in autoregressive sampling); the
/// rest draw the lag log-uniformly in `[1, max]`, which covers the pipelined
/// sampler's offsets.
pub fn staircase_levels(frames: usize, max: usize, key: RngKey) -> Vec<usize> {
    let key = key.kind(DrawKind::Level);
    let lag = if key.frame(0).uniform() < 0.5 {
        max
    } else {
        ((max as f64).powf(key.frame(1).uniform()).round() as usize).clamp(1, max)
    };
    let t0 = key.frame(2).level(frames.saturating_sub(1)) as i64;
    let k0 = 1 + key.frame(3).level(max.saturating_sub(1)) as i64;
    (0..frames as i64).map(|t| (k0 + (t - t0) * lag as i64).clamp(0, max as i64) as usize).collect()
}

/// Noised inputs and targets for a stack of equal-length latent sequences.
#[derive(Debug, Clone)]
pub struct DfBatch<S> {
    pub noisy: Tensor<S>,
    pub eps: Tensor<S>,
    pub layout: ForwardLayout,
}

impl<S: Scalar> DfBatch<S> {
    /// Draws levels `k_t ~ U{0..K}` per frame, condition drops with
    /// probability `drop_p`, and noise, all keyed by `key.derive(i)` for
    /// sequence `i`.
    pub fn prepare(
        latents: &[&Tensor<S>],
        conds: &[TextCondition],
        s: &DiffusionSchedule,
        key: RngKey,
        drop_p: f64,
    ) -> Result<Self> {
        let levels: Vec<Vec<usize>> = latents
            .iter()
            .enumerate()
            .map(|(i, z)| {
                (0..z.rows())
                    .map(|t| key.derive(i as u64).kind(DrawKind::Level).frame(t).level(s.steps()))
                    .collect()
            })
            .collect();
        Self::with_levels(latents, conds, s, key, drop_p, &levels)
    }

    pub fn with_levels(
        latents: &[&Tensor<S>],
        conds: &[TextCondition],
        s: &DiffusionSchedule,
        key: RngKey,
        drop_p: f64,
        levels: &[Vec<usize>],
    ) -> Result<Self> {
        let n = latents.len();
        if n == 0 || conds.len() != n || levels.len() != n {
            return Err(Error::Shape(format!(
                "{n} latents, {} conditions, {} level lists",
                conds.len(),
                levels.len()
            )));
        }
        let seq_len = latents[0].rows();
        if latents.iter().any(|z| z.rows() != seq_len) {
            return Err(Error::Shape("training batch needs equal-length sequences".into()));
        }
        let mut noisy = Vec::with_capacity(n);
        let mut eps = Vec::with_capacity(n);
        let mut used = Vec::with_capacity(n);
        for (i, z) in latents.iter().enumerate() {
            let (zt, e) = forward_diffuse(z, &levels[i], s, key.derive(i as u64).kind(DrawKind::Noise))?;
            noisy.push(zt);
            eps.push(e);
            let dropped = drop_p > 0.0 && drop_condition(key.derive(i as u64).kind(DrawKind::Drop), drop_p);
            used.push(if dropped { make_null_condition() } else { conds[i].clone() });
        }
        let train_levels: Vec<usize> = levels.iter().flatten().map(|&k| s.train_level(k)).collect();
        Ok(Self {
            noisy: Tensor::concat_rows(&noisy.iter().collect::<Vec<_>>())?,
            eps: Tensor::concat_rows(&eps.iter().collect::<Vec<_>>())?,
            layout: ForwardLayout::batch(n, seq_len, train_levels, &used)?,
        })
    }
}

/// Mean squared residual between the drawn and predicted noise.
pub fn df_loss_graph<'a, S: Scalar>(
    g: &mut Graph<'a, S>,
    b: &Bound,
    params: &DitParams<S>,
    batch: &'a DfBatch<S>,
) -> Result<Var> {
    let x = g.constant_ref(&batch.noisy);
    let out = forward_graph(g, b, &params.config, x, &batch.layout, None)?;
    let target = g.constant_ref(&batch.eps);
    let d = g.sub(out.eps, target)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Diffusion-forcing objective on one latent sequence.
pub fn df_training_loss<S: Scalar>(
    params: &DitParams<S>,
    z: &Tensor<S>,
    c: &TextCondition,
    s: &DiffusionSchedule,
    key: RngKey,
    drop_p: f64,
) -> Result<S> {
    let batch = DfBatch::prepare(&[z], std::slice::from_ref(c), s, key, drop_p)?;
    let mut g = Graph::new();
    let b = g.bind(&params.params, false);
    let l = df_loss_graph(&mut g, &b, params, &batch)?;
    Ok(g.scalar(l))
}
