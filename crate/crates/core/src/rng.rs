//! Counter-based random draws.
//!
//! Every draw is addressed by an [`RngKey`]: the same key always yields the
//! same numbers, and keys differing in any field give independent streams.
//! Samplers rely on this so that two schedules consuming the same
//! `(frame, step)` draws produce identical trajectories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DrawKind {
    /// Initial noise of a frame before denoising.
    Init,
    /// Per-step noise `w` of the reverse update.
    Ancestral,
    /// Latent posterior sampling.
    Reparam,
    /// Condition drop decisions.
    Drop,
    /// Per-frame diffusion level during training.
    Level,
    /// Forward-diffusion noise `eps`.
    Noise,
    /// Dataset jitter and augmentation.
    Data,
    /// Parameter initialization and minibatch order.
    Train,
}

impl DrawKind {
    fn code(self) -> u64 {
        match self {
            DrawKind::Init => 1,
            DrawKind::Ancestral => 2,
            DrawKind::Reparam => 3,
            DrawKind::Drop => 4,
            DrawKind::Level => 5,
            DrawKind::Noise => 6,
            DrawKind::Data => 7,
            DrawKind::Train => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngKey {
    pub seed: u64,
    pub frame: u64,
    pub step: u64,
    pub kind: DrawKind,
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministically folds several words into one seed.
pub fn mix_seed(words: &[u64]) -> u64 {
    words.iter().fold(0x6A09_E667_F3BC_C908, |acc, &w| splitmix(acc ^ splitmix(w)))
}

impl RngKey {
    pub fn new(seed: u64, kind: DrawKind) -> Self {
        Self { seed, frame: 0, step: 0, kind }
    }

    pub fn frame(self, frame: usize) -> Self {
        Self { frame: frame as u64, ..self }
    }

    pub fn step(self, step: usize) -> Self {
        Self { step: step as u64, ..self }
    }

    pub fn kind(self, kind: DrawKind) -> Self {
        Self { kind, ..self }
    }

    /// Child key: folds `word` into the seed, so its draws are independent
    /// of the parent's for every `frame`/`step` value. Use this rather than
    /// `step` to nest indices, since `step` overwrites.
    pub fn derive(self, word: u64) -> Self {
        Self { seed: mix_seed(&[self.seed, word]), ..self }
    }

    pub fn stream(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, self.kind.code(), self.frame, self.step]))
    }

    pub fn normals<S: Scalar>(&self, n: usize) -> Vec<S> {
        let mut rng = self.stream();
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                S::lit(z)
            })
            .collect()
    }

    pub fn uniform(&self) -> f64 {
        self.stream().random::<f64>()
    }

    /// Uniform integer in `0..=max`.
    pub fn level(&self, max: usize) -> usize {
        self.stream().random_range(0..=max)
    }
}
