//! Autoregressive and frame-wise-schedule samplers.
//!
//! Both samplers draw the initial noise of frame `t` from
//! `(seed, Init, t)` and the reverse-step noise of frame `t` leaving level
//! `k` from `(seed, Ancestral, t, k)`. With the lag `L` equal to `K` the
//! frame-wise schedule performs exactly the autoregressive sequence of
//! forwards, so the two produce identical latents.
//!
//! A frame that reaches level 0 is frozen: it enters the next forward once at
//! level 0 so its keys and values can be appended to the cache, and is never
//! recomputed afterwards.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffusion::{cfg_combine, reverse_step, DiffusionSchedule};
use crate::dit::{dit_forward, forward_cached, make_null_condition, DitParams, KvCache, TextCondition};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::{DrawKind, RngKey};
use crate::scalar::Scalar;
use crate::vae::{decode, LatentSequence, LatentStats, MotionSequence, VaeParams, DOWNSAMPLE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Ar,
    Fss,
}

impl std::fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerMode::Ar => "ar",
            SamplerMode::Fss => "fss",
        })
    }
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ar" => Ok(SamplerMode::Ar),
            "fss" => Ok(SamplerMode::Fss),
            _ => Err(Error::Config(format!("unknown sampler mode `{s}` (expected ar or fss)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    /// Denoising steps per frame at inference.
    pub steps: usize,
    /// Lag between adjacent frames' pipelines.
    pub lag: usize,
    pub guidance: f64,
    /// Attention context in latent frames; `None` attends to the whole prefix.
    pub horizon: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { mode: SamplerMode::Fss, steps: 50, lag: 2, guidance: 3.0, horizon: None }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler.steps must be >= 1".into()));
        }
        if self.lag == 0 || self.lag > self.steps {
            return Err(Error::Config(format!("sampler.lag must be in [1, {}], got {}", self.steps, self.lag)));
        }
        if !self.guidance.is_finite() {
            return Err(Error::Config("sampler.guidance must be finite".into()));
        }
        if self.horizon == Some(0) {
            return Err(Error::Config("sampler.horizon must be >= 1".into()));
        }
        Ok(())
    }
}

/// `levels[m][t]`: noise level of frame `t` at iteration `m`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleMatrix {
    pub k: usize,
    pub lag: usize,
    pub frames: usize,
    pub levels: Vec<Vec<usize>>,
}

/// `K_{m,t} = clamp(K - m + t L, 0, K)` with 0-based `m` and `t`,
/// for `m = 0 .. K + (T - 1) L`.
pub fn build_fss_matrix(k: usize, lag: usize, frames: usize) -> Result<ScheduleMatrix> {
    if k == 0 {
        return Err(Error::Schedule("K must be >= 1".into()));
    }
    if lag == 0 || lag > k {
        return Err(Error::Schedule(format!("lag {lag} outside [1, {k}]")));
    }
    if frames == 0 {
        return Err(Error::Schedule("need at least one frame".into()));
    }
    let rows = k + (frames - 1) * lag + 1;
    let levels = (0..rows)
        .map(|m| {
            (0..frames)
                .map(|t| (k as i64 - m as i64 + (t * lag) as i64).clamp(0, k as i64) as usize)
                .collect()
        })
        .collect();
    Ok(ScheduleMatrix { k, lag, frames, levels })
}

impl ScheduleMatrix {
    pub fn rows(&self) -> usize {
        self.levels.len()
    }

    /// Checks the boundary rows and the monotonicity laws.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Schedule(m));
        let (m, t) = (self.rows(), self.frames);
        if m < 2 || self.levels.iter().any(|r| r.len() != t) {
            return bad(format!("matrix shape {m} x {t} invalid"));
        }
        if self.levels[0].iter().any(|&v| v != self.k) {
            return bad("first row must be all K".into());
        }
        if self.levels[m - 1].iter().any(|&v| v != 0) {
            return bad("last row must be all 0".into());
        }
        for (i, row) in self.levels.iter().enumerate() {
            if row.windows(2).any(|w| w[0] > w[1]) {
                return bad(format!("row {i} decreases left to right"));
            }
            if row.iter().any(|&v| v > self.k) {
                return bad(format!("row {i} exceeds K"));
            }
            if i > 0 {
                for (j, (&a, &b)) in self.levels[i - 1].iter().zip(row).enumerate() {
                    if b > a || a - b > 1 {
                        return bad(format!("column {j} steps from {a} to {b} at row {i}"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Frames stepped from row `m` to row `m + 1`.
    pub fn active(&self, m: usize) -> Vec<usize> {
        (0..self.frames)
            .filter(|&t| self.levels[m][t] > 0 && self.levels[m + 1][t] + 1 == self.levels[m][t])
            .collect()
    }
}

/// Which caption conditions each latent frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionPlan {
    pub segments: Vec<(usize, TextCondition)>,
}

impl CaptionPlan {
    pub fn single(c: TextCondition) -> Self {
        Self { segments: vec![(0, c)] }
    }

    /// `captions[i]` is active from latent frame `starts[i]`; `starts[0]` must be 0.
    pub fn switching(captions: Vec<TextCondition>, switch_at: &[usize]) -> Result<Self> {
        if captions.is_empty() || switch_at.len() + 1 != captions.len() {
            return Err(Error::Config(format!(
                "{} captions need {} switch points, got {}",
                captions.len(),
                captions.len().saturating_sub(1),
                switch_at.len()
            )));
        }
        if switch_at.windows(2).any(|w| w[0] >= w[1]) || switch_at.first() == Some(&0) {
            return Err(Error::Config("switch points must be increasing and > 0".into()));
        }
        let starts = std::iter::once(0).chain(switch_at.iter().copied());
        Ok(Self { segments: starts.zip(captions).collect() })
    }

    pub fn at(&self, frame: usize) -> &TextCondition {
        let i = self.segments.iter().rposition(|(s, _)| *s <= frame).unwrap_or(0);
        &self.segments[i].1
    }
}

#[derive(Debug, Clone)]
pub struct GenerationReport<S> {
    pub motion: Option<MotionSequence<S>>,
    pub latents: LatentSequence<S>,
    /// Guided denoiser evaluations (one batched forward each, two network
    /// passes when guidance is active).
    pub model_calls: usize,
    pub network_passes: usize,
    /// Evaluations in which each frame was stepped.
    pub per_frame_calls: Vec<usize>,
    /// Value of `model_calls` when each frame reached level 0.
    pub completed_at: Vec<usize>,
    pub wall_time: f64,
}

impl<S> GenerationReport<S> {
    /// Mean calls between consecutive frame completions after the first.
    pub fn amortized_calls_per_frame(&self) -> f64 {
        let n = self.completed_at.len();
        if n < 2 {
            return self.model_calls as f64;
        }
        (self.completed_at[n - 1] - self.completed_at[0]) as f64 / (n - 1) as f64
    }
}

/// Everything a sampler needs besides the schedule shape.
pub struct SamplerInputs<'a, S> {
    pub dit: &'a DitParams<S>,
    pub vae: Option<&'a VaeParams<S>>,
    /// Maps sampled latents back to the encoder's scale before decoding.
    pub stats: Option<&'a LatentStats<S>>,
    pub schedule: &'a DiffusionSchedule,
    pub captions: CaptionPlan,
    pub guidance: f64,
    pub horizon: Option<usize>,
    pub seed: u64,
    pub fps: f64,
    /// Replaces the keyed initial noise (`frames` x `latent_dim`).
    pub init_noise: Option<&'a Tensor<S>>,
}

impl<S: Scalar> SamplerInputs<'_, S> {
    fn initial(&self, t: usize) -> Result<Vec<S>> {
        let d = self.dit.config.latent_dim;
        match self.init_noise {
            Some(n) if t < n.rows() && n.cols() == d => Ok(n.row(t).to_vec()),
            Some(n) => Err(Error::Shape(format!("initial noise {:?} has no frame {t} of width {d}", n.shape()))),
            None => Ok(init_key(self.seed, t).normals(d)),
        }
    }
}

fn init_key(seed: u64, t: usize) -> RngKey {
    RngKey::new(seed, DrawKind::Init).frame(t)
}

fn ancestral_key(seed: u64, t: usize, k: usize) -> RngKey {
    RngKey::new(seed, DrawKind::Ancestral).frame(t).step(k)
}

/// Guided noise prediction with separate caches for the two branches.
struct Denoiser<'a, S> {
    inp: &'a SamplerInputs<'a, S>,
    null: TextCondition,
    cond_cache: KvCache<S>,
    null_cache: KvCache<S>,
    calls: usize,
    passes: usize,
}

impl<'a, S: Scalar> Denoiser<'a, S> {
    fn new(inp: &'a SamplerInputs<'a, S>) -> Self {
        Self {
            inp,
            null: make_null_condition(),
            cond_cache: KvCache::new(&inp.dit.config),
            null_cache: KvCache::new(&inp.dit.config),
            calls: 0,
            passes: 0,
        }
    }

    fn guided(&self) -> bool {
        self.inp.guidance != 1.0
    }

    fn cached(&self) -> usize {
        self.cond_cache.len()
    }

    /// Predicts noise for frames `cached()..cached() + window.rows()` at the
    /// given schedule levels and commits the first `commit` rows.
    fn eps(&mut self, window: &Tensor<S>, levels: &[usize], commit: usize) -> Result<Tensor<S>> {
        let offset = self.cached();
        let train: Vec<usize> = levels.iter().map(|&k| self.inp.schedule.train_level(k)).collect();
        let conds: Vec<&TextCondition> =
            (0..window.rows()).map(|i| self.inp.captions.at(offset + i)).collect();
        let cond = forward_cached(self.inp.dit, &mut self.cond_cache, window, &train, &conds, commit, self.inp.horizon)?;
        self.calls += 1;
        self.passes += 1;
        if !self.guided() {
            return Ok(cond);
        }
        let nulls = vec![&self.null; window.rows()];
        let uncond =
            forward_cached(self.inp.dit, &mut self.null_cache, window, &train, &nulls, commit, self.inp.horizon)?;
        self.passes += 1;
        cfg_combine(&cond, &uncond, self.inp.guidance)
    }
}

/// Emits decoded frames as latent frames freeze.
struct Streamer<'a, S> {
    vae: Option<&'a VaeParams<S>>,
    stats: Option<&'a LatentStats<S>>,
    fps: f64,
    frames: Option<Tensor<S>>,
}

impl<'a, S: Scalar> Streamer<'a, S> {
    fn new(inp: &SamplerInputs<'a, S>) -> Self {
        Self { vae: inp.vae, stats: inp.stats, fps: inp.fps, frames: None }
    }

    /// `frozen` holds all latents frozen so far; emits the 4 motion frames of
    /// the newest one. Earlier frames are never touched again.
    fn emit(&mut self, frozen: &Tensor<S>) -> Result<()> {
        let Some(vae) = self.vae else { return Ok(()) };
        let u = frozen.rows();
        let z = match self.stats {
            Some(st) => st.denormalize(frozen),
            None => frozen.clone(),
        };
        let out = decode(&LatentSequence::new(z), vae, self.fps)?;
        let fresh = out.frames.slice_rows((u - 1) * DOWNSAMPLE, u * DOWNSAMPLE);
        match &mut self.frames {
            Some(f) => f.push_rows(&fresh)?,
            None => self.frames = Some(fresh),
        }
        Ok(())
    }

    fn finish(self) -> Option<MotionSequence<S>> {
        let fps = self.fps;
        self.frames.map(|f| MotionSequence::new(f, fps))
    }
}

/// Strict autoregression: each frame runs all `K` reverse steps with the
/// previous frames frozen.
pub fn ar_generate<S: Scalar>(inp: &SamplerInputs<'_, S>, frames: usize) -> Result<GenerationReport<S>> {
    if frames == 0 {
        return Err(Error::InputTooShort { frames: 0, min: 1 });
    }
    let start = Instant::now();
    let k_max = inp.schedule.steps();
    let d = inp.dit.config.latent_dim;
    let mut den = Denoiser::new(inp);
    let mut stream = Streamer::new(inp);
    let mut z = Tensor::zeros(0, d);
    let mut per_frame = vec![0; frames];
    let mut completed = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut x = Tensor::from_vec(1, d, inp.initial(t)?)?;
        for k in (1..=k_max).rev() {
            let pending = z.rows() - den.cached();
            let (window, levels) = if pending > 0 {
                let mut w = z.slice_rows(den.cached(), z.rows());
                w.push_rows(&x)?;
                let mut lv = vec![0; pending];
                lv.push(k);
                (w, lv)
            } else {
                (x.clone(), vec![k])
            };
            let eps = den.eps(&window, &levels, pending)?;
            let e = eps.slice_rows(eps.rows() - 1, eps.rows());
            x = reverse_step(&x, &e, k, inp.schedule, ancestral_key(inp.seed, t, k))?;
            per_frame[t] += 1;
        }
        z.push_rows(&x)?;
        completed.push(den.calls);
        stream.emit(&z)?;
    }
    Ok(GenerationReport {
        motion: stream.finish(),
        latents: LatentSequence::new(z),
        model_calls: den.calls,
        network_passes: den.passes,
        per_frame_calls: per_frame,
        completed_at: completed,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Frame-wise schedule: at row `m` every frame whose level drops to row
/// `m + 1` takes one reverse step, all predicted by one forward over the
/// window from a snapshot of the row-`m` latents.
pub fn fss_generate<S: Scalar>(inp: &SamplerInputs<'_, S>, matrix: &ScheduleMatrix) -> Result<GenerationReport<S>> {
    matrix.validate()?;
    if matrix.k != inp.schedule.steps() {
        return Err(Error::Schedule(format!(
            "matrix K = {} but the schedule has {} steps",
            matrix.k,
            inp.schedule.steps()
        )));
    }
    let start = Instant::now();
    let frames = matrix.frames;
    let d = inp.dit.config.latent_dim;
    let mut z = Tensor::zeros(frames, d);
    for t in 0..frames {
        z.row_mut(t).copy_from_slice(&inp.initial(t)?);
    }
    let mut den = Denoiser::new(inp);
    let mut stream = Streamer::new(inp);
    let mut per_frame = vec![0; frames];
    let mut completed = Vec::with_capacity(frames);
    let mut frozen = 0;
    for m in 0..matrix.rows() - 1 {
        let active = matrix.active(m);
        if active.is_empty() {
            continue;
        }
        let (first, last) = (active[0], active[active.len() - 1]);
        if last - first + 1 != active.len() || first != frozen {
            return Err(Error::Schedule(format!("row {m}: active frames {active:?} not contiguous after frozen prefix")));
        }
        let lo = den.cached();
        let window = z.slice_rows(lo, last + 1);
        let levels: Vec<usize> = (lo..=last).map(|t| matrix.levels[m][t]).collect();
        let eps = den.eps(&window, &levels, first - lo)?;
        for t in first..=last {
            let row = |x: &Tensor<S>, r: usize| x.slice_rows(r, r + 1);
            let k = matrix.levels[m][t];
            let next = reverse_step(&row(&z, t), &row(&eps, t - lo), k, inp.schedule, ancestral_key(inp.seed, t, k))?;
            z.row_mut(t).copy_from_slice(next.row(0));
            per_frame[t] += 1;
        }
        while frozen < frames && matrix.levels[m + 1][frozen] == 0 {
            frozen += 1;
            completed.push(den.calls);
            stream.emit(&z.slice_rows(0, frozen))?;
        }
    }
    Ok(GenerationReport {
        motion: stream.finish(),
        latents: LatentSequence::new(z),
        model_calls: den.calls,
        network_passes: den.passes,
        per_frame_calls: per_frame,
        completed_at: completed,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Frame-wise schedule evaluated without batching or caching: every stepped
/// frame gets its own full-prefix forward on the row snapshot.
pub fn fss_reference<S: Scalar>(inp: &SamplerInputs<'_, S>, matrix: &ScheduleMatrix) -> Result<Tensor<S>> {
    matrix.validate()?;
    let frames = matrix.frames;
    let d = inp.dit.config.latent_dim;
    let mut z = Tensor::zeros(frames, d);
    for t in 0..frames {
        z.row_mut(t).copy_from_slice(&inp.initial(t)?);
    }
    let null = make_null_condition();
    for m in 0..matrix.rows() - 1 {
        let snapshot = z.clone();
        for t in matrix.active(m) {
            let prefix = snapshot.slice_rows(0, t + 1);
            let levels: Vec<usize> =
                (0..=t).map(|j| inp.schedule.train_level(matrix.levels[m][j])).collect();
            let per_frame = |c: &TextCondition| -> Result<Tensor<S>> {
                // conditions can switch mid-sequence, so run row by row
                let conds: Vec<&TextCondition> =
                    (0..=t).map(|j| if c.null_flag { c } else { inp.captions.at(j) }).collect();
                let mut cache = KvCache::new(&inp.dit.config);
                let out = forward_cached(inp.dit, &mut cache, &prefix, &levels, &conds, 0, None)?;
                Ok(out.slice_rows(t, t + 1))
            };
            let cond = per_frame(inp.captions.at(t))?;
            let eps = if inp.guidance != 1.0 { cfg_combine(&cond, &per_frame(&null)?, inp.guidance)? } else { cond };
            let k = matrix.levels[m][t];
            let next = reverse_step(&snapshot.slice_rows(t, t + 1), &eps, k, inp.schedule, ancestral_key(inp.seed, t, k))?;
            z.row_mut(t).copy_from_slice(next.row(0));
        }
    }
    Ok(z)
}

/// Plain single-sequence DDPM sampling of `frames` latent frames denoised
/// jointly; with one frame this is what both samplers reduce to.
pub fn joint_generate<S: Scalar>(inp: &SamplerInputs<'_, S>, frames: usize) -> Result<Tensor<S>> {
    let d = inp.dit.config.latent_dim;
    let mut z = Tensor::zeros(frames, d);
    for t in 0..frames {
        z.row_mut(t).copy_from_slice(&inp.initial(t)?);
    }
    let c = inp.captions.at(0).clone();
    let null = make_null_condition();
    for k in (1..=inp.schedule.steps()).rev() {
        let levels = vec![inp.schedule.train_level(k); frames];
        let cond = dit_forward(&z, &levels, &c, inp.dit)?;
        let eps =
            if inp.guidance != 1.0 { cfg_combine(&cond, &dit_forward(&z, &levels, &null, inp.dit)?, inp.guidance)? } else { cond };
        let mut next = Tensor::zeros(frames, d);
        for t in 0..frames {
            let r = reverse_step(&z.slice_rows(t, t + 1), &eps.slice_rows(t, t + 1), k, inp.schedule, ancestral_key(inp.seed, t, k))?;
            next.row_mut(t).copy_from_slice(r.row(0));
        }
        z = next;
    }
    Ok(z)
}
