//! Run configuration: one JSON document holding every hyperparameter.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{DatasetSpec, MOTION_DIM};
use crate::diffusion::DiffusionConfig;
use crate::dit::DitConfig;
use crate::error::{Error, Result};
use crate::optim::OptimConfig;
use crate::sampler::SamplerConfig;
use crate::vae::VaeConfig;

/// One optimisation stage (VAE or DiT).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub steps: usize,
    /// Sequences per minibatch.
    pub batch: usize,
    pub optim: OptimConfig,
    pub log_every: usize,
}

impl StageConfig {
    fn validate(&self, section: &str) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config(format!("{section}.batch must be >= 1")));
        }
        self.optim.validate(&format!("{section}.optim"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub vae: StageConfig,
    pub dit: StageConfig,
    /// Add the alignment objective to VAE training.
    pub align: bool,
    /// Floor on per-channel latent std, relative to the largest channel.
    pub latent_std_floor: f64,
    /// Fraction of DiT training sequences whose levels follow a sampler-shaped
    /// staircase instead of independent uniform draws.
    pub staircase_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            vae: StageConfig {
                steps: 1500,
                batch: 8,
                optim: OptimConfig { lr: 2e-3, min_lr: 1e-4, warmup: 50, ..OptimConfig::default() },
                log_every: 100,
            },
            dit: StageConfig {
                steps: 12000,
                batch: 16,
                optim: OptimConfig { lr: 1e-3, min_lr: 5e-5, warmup: 100, ..OptimConfig::default() },
                log_every: 100,
            },
            align: true,
            latent_std_floor: 0.05,
            staircase_prob: 0.5,
        }
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        TrainConfig::default().dit
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generations per caption for the consistency score.
    pub samples_per_caption: usize,
    /// Two-caption generations for the transition-smoothness study.
    pub transitions: usize,
    /// Motion frames generated per caption in a transition run.
    pub segment_frames: usize,
    /// Width in frames of the window scored around a transition.
    pub jerk_window: usize,
    /// Spread independent generations over worker threads.
    pub parallel: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples_per_caption: 10, transitions: 50, segment_frames: 32, jerk_window: 16, parallel: false }
    }
}

impl EvalConfig {
    fn validate(&self) -> Result<()> {
        if self.samples_per_caption == 0 {
            return Err(Error::Config("eval.samples_per_caption must be >= 1".into()));
        }
        if self.segment_frames < 4 || self.segment_frames % 4 != 0 {
            return Err(Error::Config(format!(
                "eval.segment_frames must be a positive multiple of 4, got {}",
                self.segment_frames
            )));
        }
        if self.jerk_window == 0 {
            return Err(Error::Config("eval.jerk_window must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DatasetSpec,
    pub vae: VaeConfig,
    pub dit: DitConfig,
    pub diffusion: DiffusionConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DatasetSpec::default(),
            vae: VaeConfig::default(),
            dit: DitConfig::default(),
            diffusion: DiffusionConfig::default(),
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Sets `a.b.c` in a JSON object, creating intermediate objects.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{path}`")));
    }
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}`: `{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Parses `key=value`; the value is read as JSON and falls back to a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` must look like key=value")))?;
    let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), v))
}

fn fingerprint(v: &Value) -> u64 {
    let digest = Sha256::digest(v.to_string().as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

impl RunConfig {
    /// Parses a JSON document, applies `key=value` overrides, fills defaults
    /// and validates. Errors name the offending key.
    pub fn from_json(text: &str, overrides: &[(String, Value)]) -> Result<Self> {
        let mut v: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        if !v.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        for (k, val) in overrides {
            set_path(&mut v, k, val.clone())?;
        }
        let cfg: Self = serde_path_to_error::deserialize(v).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path, overrides: &[(String, Value)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.vae.validate()?;
        self.dit.validate()?;
        self.diffusion.validate()?;
        self.sampler.validate()?;
        self.train.vae.validate("train.vae")?;
        self.train.dit.validate("train.dit")?;
        self.eval.validate()?;
        if !(0.0..=1.0).contains(&self.train.latent_std_floor) {
            return Err(Error::Config("train.latent_std_floor must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.train.staircase_prob) {
            return Err(Error::Config("train.staircase_prob must be in [0, 1]".into()));
        }
        if self.vae.motion_dim != MOTION_DIM {
            return Err(Error::Config(format!("vae.motion_dim must be {MOTION_DIM} for the toy dataset")));
        }
        if self.dit.latent_dim != self.vae.latent_dim {
            return Err(Error::Config(format!(
                "dit.latent_dim {} differs from vae.latent_dim {}",
                self.dit.latent_dim, self.vae.latent_dim
            )));
        }
        if self.dit.max_level != self.diffusion.steps {
            return Err(Error::Config(format!(
                "dit.max_level {} differs from diffusion.steps {}",
                self.dit.max_level, self.diffusion.steps
            )));
        }
        if self.sampler.steps > self.diffusion.steps {
            return Err(Error::Config(format!(
                "sampler.steps {} exceeds diffusion.steps {}",
                self.sampler.steps, self.diffusion.steps
            )));
        }
        Ok(())
    }

    /// Fingerprint of everything a VAE checkpoint depends on structurally.
    pub fn vae_hash(&self) -> u64 {
        fingerprint(&serde_json::json!({ "vae": self.vae }))
    }

    /// Fingerprint for DiT checkpoints, which are tied to a latent space.
    pub fn dit_hash(&self) -> u64 {
        fingerprint(&serde_json::json!({ "vae": self.vae, "dit": self.dit, "diffusion": self.diffusion }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_json("{}", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn resolved_round_trip() {
        let over = vec![parse_override("sampler.lag=3").unwrap(), parse_override("seed=9").unwrap()];
        let a = RunConfig::from_json("{\"dit\": {\"layers\": 2}}", &over).unwrap();
        assert_eq!(a.sampler.lag, 3);
        assert_eq!(a.dit.layers, 2);
        let b = RunConfig::from_json(&a.to_json(), &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::from_json("{\"sampler\": {\"lagg\": 2}}", &[]).unwrap_err().to_string();
        assert!(e.contains("sampler") && e.contains("lagg"), "{e}");
        let e = RunConfig::from_json("{}", &[parse_override("train.vae.optim.lrr=1").unwrap()])
            .unwrap_err()
            .to_string();
        assert!(e.contains("train.vae.optim") && e.contains("lrr"), "{e}");
    }

    #[test]
    fn bad_values_are_named() {
        let e = RunConfig::from_json("{\"sampler\": {\"lag\": 0}}", &[]).unwrap_err().to_string();
        assert!(e.contains("sampler.lag"), "{e}");
        let e = RunConfig::from_json("{\"vae\": {\"latent_dim\": 8}}", &[]).unwrap_err().to_string();
        assert!(e.contains("dit.latent_dim"), "{e}");
        let e = RunConfig::from_json("{\"vae\": {\"align\": {\"m1\": 2}}}", &[]).unwrap_err().to_string();
        assert!(e.contains("vae.align.m1"), "{e}");
        let e = RunConfig::from_json("{\"dit\": {\"heads\": \"four\"}}", &[]).unwrap_err().to_string();
        assert!(e.contains("dit.heads"), "{e}");
    }

    #[test]
    fn hashes_track_relevant_sections() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.sampler.lag = 5;
        b.train.vae.steps = 1;
        assert_eq!(a.vae_hash(), b.vae_hash());
        assert_eq!(a.dit_hash(), b.dit_hash());
        b.dit.layers = 2;
        assert_eq!(a.vae_hash(), b.vae_hash());
        assert_ne!(a.dit_hash(), b.dit_hash());
        b.vae.channels = 32;
        assert_ne!(a.vae_hash(), b.vae_hash());
    }
}
