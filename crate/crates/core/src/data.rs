//! Synthetic caption-conditioned 2-D trajectories.
//!
//! Each caption is a (shape, speed) pair. A trajectory starts at the origin,
//! follows the shape's parametric curve at the speed's rate, and is rotated
//! and optionally mirrored by a seeded draw. Frames carry `(x, y, vx, vy)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::{mix_seed, DrawKind, RngKey};
use crate::scalar::Scalar;
use crate::vae::MotionSequence;

pub const MOTION_DIM: usize = 4;
pub const WORDS: [&str; 6] = ["circle", "line", "zigzag", "spiral", "slow", "fast"];
pub const NULL_TOKEN: usize = WORDS.len();
pub const VOCAB_SIZE: usize = WORDS.len() + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Line,
    Zigzag,
    Spiral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeedKind {
    Slow,
    Fast,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] =
        [ShapeKind::Circle, ShapeKind::Line, ShapeKind::Zigzag, ShapeKind::Spiral];

    fn token(self) -> usize {
        self as usize
    }

    /// Position along the curve at curve-time `s`; every curve starts at the origin.
    fn point(self, s: f64) -> (f64, f64) {
        match self {
            ShapeKind::Circle => {
                let r = 0.3;
                (r * s.sin(), r * (1.0 - s.cos()))
            }
            ShapeKind::Line => (0.3 * s, 0.0),
            ShapeKind::Zigzag => (0.3 * s, 0.12 * (std::f64::consts::TAU * s / 1.2).sin()),
            ShapeKind::Spiral => {
                let r = 0.15 * s;
                (r * (2.0 * s).cos(), r * (2.0 * s).sin())
            }
        }
    }
}

impl SpeedKind {
    pub const ALL: [SpeedKind; 2] = [SpeedKind::Slow, SpeedKind::Fast];

    fn token(self) -> usize {
        4 + self as usize
    }

    /// Curve-time advanced per second.
    pub fn rate(self) -> f64 {
        match self {
            SpeedKind::Slow => 1.0,
            SpeedKind::Fast => 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToyCaption {
    pub shape: ShapeKind,
    pub speed: SpeedKind,
}

impl ToyCaption {
    pub fn new(shape: ShapeKind, speed: SpeedKind) -> Self {
        Self { shape, speed }
    }

    /// All 8 captions in a fixed order.
    pub fn all() -> Vec<ToyCaption> {
        ShapeKind::ALL
            .iter()
            .flat_map(|&shape| SpeedKind::ALL.iter().map(move |&speed| ToyCaption { shape, speed }))
            .collect()
    }

    pub fn index(self) -> usize {
        self.shape as usize * 2 + self.speed as usize
    }

    pub fn tokens(self) -> [usize; 2] {
        [self.shape.token(), self.speed.token()]
    }

    pub fn from_tokens(tokens: &[usize]) -> Result<Self> {
        let shape = match tokens.first() {
            Some(&t) if t < 4 => ShapeKind::ALL[t],
            other => return Err(Error::Config(format!("invalid shape token {other:?}"))),
        };
        let speed = match tokens.get(1) {
            Some(4) => SpeedKind::Slow,
            Some(5) => SpeedKind::Fast,
            other => return Err(Error::Config(format!("invalid speed token {other:?}"))),
        };
        if tokens.len() != 2 {
            return Err(Error::Config(format!("caption needs 2 tokens, got {}", tokens.len())));
        }
        Ok(Self { shape, speed })
    }
}

impl fmt::Display for ToyCaption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b] = self.tokens();
        write!(f, "{} {}", WORDS[b], WORDS[a])
    }
}

impl FromStr for ToyCaption {
    type Err = Error;

    /// Accepts "fast circle", "circle-fast", "circle fast", etc.
    fn from_str(s: &str) -> Result<Self> {
        let mut shape = None;
        let mut speed = None;
        for word in s.split(|c: char| c == ' ' || c == '-' || c == '_').filter(|w| !w.is_empty()) {
            match WORDS.iter().position(|w| w.eq_ignore_ascii_case(word)) {
                Some(i) if i < 4 => shape = Some(ShapeKind::ALL[i]),
                Some(i) => speed = Some(SpeedKind::ALL[i - 4]),
                None => return Err(Error::Config(format!("unknown caption word `{word}`"))),
            }
        }
        match (shape, speed) {
            (Some(shape), Some(speed)) => Ok(Self { shape, speed }),
            _ => Err(Error::Config(format!("caption `{s}` needs a shape and a speed"))),
        }
    }
}

/// Rotation angle and mirror flag applied to a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub angle: f64,
    pub mirror: bool,
}

impl Pose {
    pub const IDENTITY: Pose = Pose { angle: 0.0, mirror: false };

    pub fn from_seed(seed: u64) -> Self {
        let key = RngKey::new(seed, DrawKind::Data);
        Pose {
            angle: key.step(1).uniform() * std::f64::consts::TAU,
            mirror: key.step(2).uniform() < 0.5,
        }
    }

    fn apply(self, (x, y): (f64, f64)) -> (f64, f64) {
        let y = if self.mirror { -y } else { y };
        let (s, c) = self.angle.sin_cos();
        (c * x - s * y, s * x + c * y)
    }
}

/// Noise-free positions of `caption` under `pose`, `frames` x 2.
pub fn template_positions(caption: ToyCaption, frames: usize, fps: f64, pose: Pose) -> Vec<(f64, f64)> {
    (0..frames)
        .map(|t| pose.apply(caption.shape.point(caption.speed.rate() * t as f64 / fps)))
        .collect()
}

/// Builds `(x, y, vx, vy)` frames from positions; velocity is a backward
/// difference (forward at frame 0) scaled by `fps`.
pub fn frames_from_positions<S: Scalar>(pos: &[(f64, f64)], fps: f64) -> Tensor<S> {
    let n = pos.len();
    Tensor::from_fn(n, MOTION_DIM, |t, c| {
        let v = match c {
            0 => pos[t].0,
            1 => pos[t].1,
            _ => {
                if n < 2 {
                    0.0
                } else {
                    let (a, b) = if t == 0 { (0, 1) } else { (t - 1, t) };
                    let d = if c == 2 { pos[b].0 - pos[a].0 } else { pos[b].1 - pos[a].1 };
                    d * fps
                }
            }
        };
        S::lit(v)
    })
}

/// Deterministic trajectory for `caption` with seeded pose and Gaussian jitter
/// of std `noise_std` on every channel.
pub fn generate_trajectory<S: Scalar>(
    caption: ToyCaption,
    frames: usize,
    fps: f64,
    noise_std: f64,
    seed: u64,
) -> MotionSequence<S> {
    generate_trajectory_posed(caption, frames, fps, noise_std, seed, Pose::from_seed(seed))
}

pub fn generate_trajectory_posed<S: Scalar>(
    caption: ToyCaption,
    frames: usize,
    fps: f64,
    noise_std: f64,
    seed: u64,
    pose: Pose,
) -> MotionSequence<S> {
    let pos = template_positions(caption, frames, fps, pose);
    let mut x = frames_from_positions::<f64>(&pos, fps);
    if noise_std > 0.0 {
        let jitter = RngKey::new(seed, DrawKind::Data).step(3).normals::<f64>(x.len());
        for (v, n) in x.data_mut().iter_mut().zip(jitter) {
            *v += noise_std * n;
        }
    }
    MotionSequence::new(x.cast(), fps)
}

/// Output of [`caption_oracle`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Classification {
    Caption(ToyCaption),
    Unclassifiable,
}

impl Classification {
    pub fn caption(self) -> Option<ToyCaption> {
        match self {
            Classification::Caption(c) => Some(c),
            Classification::Unclassifiable => None,
        }
    }
}

/// Squared residual of the best rigid (rotation and reflection) alignment of
/// centered `template` onto centered `obs`.
fn aligned_residual(obs: &[(f64, f64)], template: &[(f64, f64)]) -> f64 {
    let n = obs.len() as f64;
    let centre = |p: &[(f64, f64)]| {
        let (sx, sy) = p.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        (sx / n, sy / n)
    };
    let (ox, oy) = centre(obs);
    let (tx, ty) = centre(template);
    let mut best = f64::INFINITY;
    for flip in [1.0, -1.0] {
        let (mut a, mut b, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0);
        for (&(x0, x1), &(y0, y1)) in obs.iter().zip(template) {
            let (x0, x1) = (x0 - ox, x1 - oy);
            let (y0, y1) = (y0 - tx, flip * (y1 - ty));
            a += x0 * y0 + x1 * y1;
            b += x1 * y0 - x0 * y1;
            sxx += x0 * x0 + x1 * x1;
            syy += y0 * y0 + y1 * y1;
        }
        best = best.min(sxx + syy - 2.0 * (a * a + b * b).sqrt());
    }
    best.max(0.0)
}

/// Classifies a trajectory by its nearest caption template under rigid
/// alignment of the position channels. Nearly static motion is unclassifiable.
pub fn caption_oracle<S: Scalar>(x: &MotionSequence<S>) -> Result<Classification> {
    let frames = x.len();
    if frames < 16 {
        return Err(Error::InputTooShort { frames, min: 16 });
    }
    let obs: Vec<(f64, f64)> =
        (0..frames).map(|t| (x.frames.get(t, 0).as_f64(), x.frames.get(t, 1).as_f64())).collect();
    if obs.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::NonFinite("motion positions".into()));
    }
    let (cx, cy) = obs.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let (cx, cy) = (cx / frames as f64, cy / frames as f64);
    let spread = obs.iter().map(|p| (p.0 - cx).hypot(p.1 - cy)).fold(0.0, f64::max);
    if spread < 1e-6 {
        return Ok(Classification::Unclassifiable);
    }
    let mut best = (f64::INFINITY, ToyCaption::all()[0]);
    for caption in ToyCaption::all() {
        let template = template_positions(caption, frames, x.fps, Pose::IDENTITY);
        let r = aligned_residual(&obs, &template);
        if r < best.0 {
            best = (r, caption);
        }
    }
    Ok(Classification::Caption(best.1))
}

/// Mean speed of the position channels in units per second.
pub fn mean_speed<S: Scalar>(x: &MotionSequence<S>) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let total: f64 = (1..n)
        .map(|t| {
            let dx = x.frames.get(t, 0).as_f64() - x.frames.get(t - 1, 0).as_f64();
            let dy = x.frames.get(t, 1).as_f64() - x.frames.get(t - 1, 1).as_f64();
            dx.hypot(dy)
        })
        .sum();
    total * x.fps / (n - 1) as f64
}

/// Two templates glued end to start: the second is translated to begin where
/// the first ends, so positions are continuous but velocity jumps.
pub fn hard_concatenation<S: Scalar>(
    first: ToyCaption,
    second: ToyCaption,
    frames_each: usize,
    fps: f64,
    pose: Pose,
) -> MotionSequence<S> {
    let mut pos = template_positions(first, frames_each, fps, pose);
    let end = *pos.last().expect("non-empty template");
    let second_pos = template_positions(second, frames_each, fps, pose);
    let step = if frames_each >= 2 {
        (pos[frames_each - 1].0 - pos[frames_each - 2].0, pos[frames_each - 1].1 - pos[frames_each - 2].1)
    } else {
        (0.0, 0.0)
    };
    // continue one first-template step past the end so frames do not repeat
    let origin = (end.0 + step.0, end.1 + step.1);
    pos.extend(second_pos.iter().map(|p| (p.0 + origin.0, p.1 + origin.1)));
    MotionSequence::new(frames_from_positions(&pos, fps), fps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub samples_per_caption: usize,
    pub frames: usize,
    pub fps: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { samples_per_caption: 64, frames: 64, fps: 20.0, noise_std: 0.002, seed: 1 }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 4 || self.frames % 4 != 0 {
            return Err(Error::Config(format!("data.frames must be a positive multiple of 4, got {}", self.frames)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("data.noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Config(format!("data.fps must be > 0, got {}", self.fps)));
        }
        if self.samples_per_caption == 0 {
            return Err(Error::Config("data.samples_per_caption must be >= 1".into()));
        }
        Ok(())
    }

    pub fn sample_seed(&self, caption: ToyCaption, i: usize) -> u64 {
        mix_seed(&[self.seed, caption.index() as u64, i as u64])
    }
}

#[derive(Debug, Clone)]
pub struct Sample<S> {
    pub caption: ToyCaption,
    pub motion: MotionSequence<S>,
}

#[derive(Debug, Clone)]
pub struct Dataset<S> {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample<S>>,
}

impl<S: Scalar> Dataset<S> {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let mut samples = Vec::with_capacity(spec.samples_per_caption * 8);
        for caption in ToyCaption::all() {
            for i in 0..spec.samples_per_caption {
                let motion = generate_trajectory(
                    caption,
                    spec.frames,
                    spec.fps,
                    spec.noise_std,
                    spec.sample_seed(caption, i),
                );
                samples.push(Sample { caption, motion });
            }
        }
        Ok(Self { spec: spec.clone(), samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
