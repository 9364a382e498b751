//! Trained VAE and DiT bundled for generation and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{hard_concatenation, Pose, ToyCaption};
use crate::diffusion::{subsample_schedule, DiffusionSchedule};
use crate::dit::TextCondition;
use crate::error::{Error, Result};
use crate::metrics::{consistency_eval, jerk_metrics, ConsistencyReport};
use crate::rng::mix_seed;
use crate::sampler::{ar_generate, build_fss_matrix, fss_generate, CaptionPlan, GenerationReport, SamplerInputs, SamplerMode};
use crate::scalar::Scalar;
use crate::train::DitModel;
use crate::vae::{MotionSequence, VaeParams, DOWNSAMPLE};

pub struct Pipeline<S> {
    pub config: RunConfig,
    pub vae: VaeParams<S>,
    pub model: DitModel<S>,
    /// Inference schedule (`sampler.steps` levels).
    pub schedule: DiffusionSchedule,
}

/// Jerk scores of one two-caption run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionSample {
    pub first: String,
    pub second: String,
    pub seed: u64,
    pub pj: f64,
    pub auj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub samples: Vec<TransitionSample>,
    pub median_auj: f64,
    pub median_pj: f64,
}

impl TransitionReport {
    fn new(samples: Vec<TransitionSample>) -> Self {
        let median_auj = median(samples.iter().map(|s| s.auj).collect());
        let median_pj = median(samples.iter().map(|s| s.pj).collect());
        Self { samples, median_auj, median_pj }
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Ordered caption pairs with distinct members, shuffled by `seed`.
pub fn transition_pairs(n: usize, seed: u64) -> Vec<(ToyCaption, ToyCaption)> {
    let all = ToyCaption::all();
    let mut pairs: Vec<_> =
        all.iter().flat_map(|&a| all.iter().filter(move |&&b| b != a).map(move |&b| (a, b))).collect();
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x9A1F])));
    (0..n).map(|i| pairs[i % pairs.len()]).collect()
}

/// Runs `f` over `items`, on worker threads when `parallel` is set; results
/// keep the input order either way.
fn map_items<T: Sync, R: Send>(items: &[T], parallel: bool, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if !parallel || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len());
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

impl<S: Scalar + Send + Sync> Pipeline<S> {
    pub fn new(config: RunConfig, vae: VaeParams<S>, model: DitModel<S>) -> Result<Self> {
        let full = config.diffusion.build()?;
        let schedule = subsample_schedule(&full, config.sampler.steps)?;
        Ok(Self { config, vae, model, schedule })
    }

    fn inputs(&self, captions: CaptionPlan, seed: u64) -> SamplerInputs<'_, S> {
        SamplerInputs {
            dit: &self.model.dit,
            vae: Some(&self.vae),
            stats: Some(&self.model.stats),
            schedule: &self.schedule,
            captions,
            guidance: self.config.sampler.guidance,
            horizon: self.config.sampler.horizon,
            seed,
            fps: self.config.data.fps,
            init_noise: None,
        }
    }

    /// Generates `frames` motion frames (a multiple of 4) with the given
    /// sampler; `plan` indexes latent frames.
    pub fn generate(&self, mode: SamplerMode, plan: CaptionPlan, frames: usize, seed: u64) -> Result<GenerationReport<S>> {
        if frames == 0 || frames % DOWNSAMPLE != 0 {
            return Err(Error::Config(format!("frame count must be a positive multiple of {DOWNSAMPLE}, got {frames}")));
        }
        let latent = frames / DOWNSAMPLE;
        let inp = self.inputs(plan, seed);
        match mode {
            SamplerMode::Ar => ar_generate(&inp, latent),
            SamplerMode::Fss => {
                let m = build_fss_matrix(self.schedule.steps(), self.config.sampler.lag, latent)?;
                fss_generate(&inp, &m)
            }
        }
    }

    fn motion(&self, r: GenerationReport<S>) -> Result<MotionSequence<S>> {
        r.motion.ok_or_else(|| Error::Config("pipeline has no decoder".into()))
    }

    /// Caption-oracle accuracy over `samples_per_caption` generations of the
    /// training length for every caption.
    pub fn consistency(&self, mode: SamplerMode, seed: u64) -> Result<ConsistencyReport> {
        let frames = self.config.data.frames;
        let n = self.config.eval.samples_per_caption;
        let captions = ToyCaption::all();
        // generate in parallel, then score through the shared evaluator in order
        let jobs: Vec<(ToyCaption, u64)> = captions
            .iter()
            .flat_map(|&c| (0..n).map(move |i| (c, mix_seed(&[seed, c.index() as u64, i as u64]))))
            .collect();
        let motions = map_items(&jobs, self.config.eval.parallel, |&(c, s)| {
            self.motion(self.generate(mode, CaptionPlan::single(c.into()), frames, s)?)
        })?;
        let mut it = motions.into_iter();
        consistency_eval(&captions, n, seed, |_, _| Ok(it.next().expect("one motion per job")))
    }

    /// Two-caption generations switching at the segment boundary, scored by
    /// jerk around the switch.
    pub fn transitions(&self, mode: SamplerMode, seed: u64) -> Result<TransitionReport> {
        let e = &self.config.eval;
        let seg = e.segment_frames;
        let pairs = transition_pairs(e.transitions, seed);
        let jobs: Vec<(usize, ToyCaption, ToyCaption)> = pairs.iter().enumerate().map(|(i, &(a, b))| (i, a, b)).collect();
        let samples = map_items(&jobs, e.parallel, |&(i, a, b)| {
            let s = mix_seed(&[seed, 0x7A5, i as u64]);
            let plan = CaptionPlan::switching(vec![TextCondition::from(a), b.into()], &[seg / DOWNSAMPLE])?;
            let motion = self.motion(self.generate(mode, plan, 2 * seg, s)?)?;
            let j = jerk_metrics(&motion, seg, e.jerk_window)?;
            Ok(TransitionSample { first: a.to_string(), second: b.to_string(), seed: s, pj: j.pj, auj: j.auj })
        })?;
        Ok(TransitionReport::new(samples))
    }
}

/// The same pairs stitched from clean dataset templates with no blending.
pub fn hard_concatenation_baseline(config: &RunConfig, seed: u64) -> Result<TransitionReport> {
    let e = &config.eval;
    let seg = e.segment_frames;
    let samples = transition_pairs(e.transitions, seed)
        .into_iter()
        .enumerate()
        .map(|(i, (a, b))| {
            let s = mix_seed(&[seed, 0x7A5, i as u64]);
            let motion: MotionSequence<f64> = hard_concatenation(a, b, seg, config.data.fps, Pose::from_seed(s));
            let j = jerk_metrics(&motion, seg, e.jerk_window)?;
            Ok(TransitionSample { first: a.to_string(), second: b.to_string(), seed: s, pj: j.pj, auj: j.auj })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransitionReport::new(samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_cases() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(vec![]).is_nan());
    }

    #[test]
    fn pairs_are_distinct_and_deterministic() {
        let p = transition_pairs(50, 3);
        assert_eq!(p, transition_pairs(50, 3));
        assert!(p.iter().all(|(a, b)| a != b));
        let mut u = p.clone();
        u.sort_by_key(|(a, b)| (a.index(), b.index()));
        u.dedup();
        assert_eq!(u.len(), 50);
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u64> = (0..37).collect();
        let a = map_items(&items, false, |&x| Ok(x * x)).unwrap();
        let b = map_items(&items, true, |&x| Ok(x * x)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn baseline_has_a_jerk_spike() {
        let r = hard_concatenation_baseline(&RunConfig::default(), 1).unwrap();
        assert_eq!(r.samples.len(), 50);
        assert!(r.median_auj > 0.0);
    }
}
