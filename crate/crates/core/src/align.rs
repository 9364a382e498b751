//! Motion-semantic alignment losses and the semantic-feature oracle.
//!
//! `mcos` pulls each projected latent row towards its semantic feature row
//! (cosine with margin `m1`); `mdms` matches the pairwise cosine structure of
//! latents and features (margin `m2`). The adaptive weight balances the
//! alignment gradient against the reconstruction gradient at the encoder head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_normal, Graph, Tensor, Var};
use crate::rng::mix_seed;
use crate::scalar::Scalar;
use crate::vae::{MotionSequence, DOWNSAMPLE};

/// Per-latent-step semantic features, `ceil(T/4)` x `d_f`.
pub type SemanticFeatures<S> = Tensor<S>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub feature_dim: usize,
    pub m1: f64,
    pub m2: f64,
    pub lambda_max: f64,
    pub eps: f64,
    /// Compute `mdms` on projected rather than raw latents.
    pub mdms_projected: bool,
    pub oracle_seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            m1: 0.5,
            m2: 0.25,
            lambda_max: 10.0,
            eps: 1e-8,
            mdms_projected: false,
            oracle_seed: 7,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.m1) {
            return Err(Error::Config(format!("vae.align.m1 must be in [0, 1), got {}", self.m1)));
        }
        if !(0.0..1.0).contains(&self.m2) {
            return Err(Error::Config(format!("vae.align.m2 must be in [0, 1), got {}", self.m2)));
        }
        if !(self.lambda_max > 0.0) {
            return Err(Error::Config(format!("vae.align.lambda_max must be > 0, got {}", self.lambda_max)));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::Config(format!("vae.align.eps must be >= 0, got {}", self.eps)));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("vae.align.feature_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Path of the learnable projection in the VAE parameter tree.
pub const PROJECTION: &str = "align.w";

/// `Zp = Z W` with `W` stored as `d_z x d_f`.
pub fn project_latents<S: Scalar>(z: &Tensor<S>, w: &Tensor<S>) -> Result<Tensor<S>> {
    z.matmul(w)
}

pub fn mcos_graph<S: Scalar>(g: &mut Graph<'_, S>, zp: Var, f: Var, m1: f64) -> Result<Var> {
    if g.shape(zp) != g.shape(f) {
        return Err(Error::Shape(format!("mcos: {:?} vs {:?}", g.shape(zp), g.shape(f))));
    }
    let zn = g.row_normalize(zp, "projected latents")?;
    let fn_ = g.row_normalize(f, "semantic features")?;
    let prod = g.mul(zn, fn_)?;
    let cos = g.row_sum(prod);
    let neg = g.scale(cos, -S::one());
    let pre = g.add_scalar(neg, S::lit(1.0 - m1));
    let hinge = g.relu(pre);
    Ok(g.mean(hinge))
}

/// Pairwise cosine matrix of the rows of `x`.
fn cosine_matrix<S: Scalar>(g: &mut Graph<'_, S>, x: Var, what: &'static str) -> Result<Var> {
    let n = g.row_normalize(x, what)?;
    g.matmul_t(n, n)
}

pub fn mdms_graph<S: Scalar>(g: &mut Graph<'_, S>, z: Var, f: Var, m2: f64) -> Result<Var> {
    if g.shape(z).0 != g.shape(f).0 {
        return Err(Error::Shape(format!("mdms: {} vs {} rows", g.shape(z).0, g.shape(f).0)));
    }
    let cz = cosine_matrix(g, z, "latents")?;
    let cf = cosine_matrix(g, f, "semantic features")?;
    let d = g.sub(cz, cf)?;
    let d = g.abs(d);
    let pre = g.add_scalar(d, S::lit(-m2));
    let hinge = g.relu(pre);
    Ok(g.mean(hinge))
}

/// Mean over rows of `relu(1 - m1 - cos(zp_i, f_i))`.
pub fn mcos_loss<S: Scalar>(zp: &Tensor<S>, f: &Tensor<S>, m1: f64) -> Result<S> {
    let mut g = Graph::new();
    let a = g.constant_ref(zp);
    let b = g.constant_ref(f);
    let l = mcos_graph(&mut g, a, b, m1)?;
    Ok(g.scalar(l))
}

/// Mean over all ordered pairs `(i, j)` of `relu(|cos(z_i, z_j) - cos(f_i, f_j)| - m2)`.
pub fn mdms_loss<S: Scalar>(z: &Tensor<S>, f: &Tensor<S>, m2: f64) -> Result<S> {
    let mut g = Graph::new();
    let a = g.constant_ref(z);
    let b = g.constant_ref(f);
    let l = mdms_graph(&mut g, a, b, m2)?;
    Ok(g.scalar(l))
}

/// `min(lambda_max, rec / (align + eps))`.
pub fn adaptive_lambda(grad_rec_norm: f64, grad_align_norm: f64, cfg: &AlignConfig) -> f64 {
    let denom = grad_align_norm + cfg.eps;
    if denom <= 0.0 {
        return if grad_rec_norm > 0.0 { cfg.lambda_max } else { 0.0 };
    }
    (grad_rec_norm / denom).min(cfg.lambda_max)
}

const CAPTION_EMBED_DIM: usize = 8;
const STAT_DIM: usize = 6;

/// Deterministic stand-in for a pretrained frame-level motion-language encoder.
///
/// Each 4-frame window contributes its mean position, mean velocity, mean
/// speed and a constant, concatenated with a fixed random embedding of the
/// caption tokens, then mapped to `dim` by a fixed random matrix.
pub fn semantic_oracle<S: Scalar>(
    x: &MotionSequence<S>,
    caption_tokens: &[usize],
    seed: u64,
    dim: usize,
) -> Result<SemanticFeatures<S>> {
    if x.dim() < 4 {
        return Err(Error::Shape(format!("semantic oracle needs 4 motion channels, got {}", x.dim())));
    }
    let mut caption = vec![0.0; CAPTION_EMBED_DIM];
    for &tok in caption_tokens {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xCA97, tok as u64]));
        let e: Tensor<f64> = init_normal(&mut rng, 1, CAPTION_EMBED_DIM, 1.0);
        for (c, v) in caption.iter_mut().zip(e.data()) {
            *c += v;
        }
    }
    let in_dim = STAT_DIM + CAPTION_EMBED_DIM;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x0A11]));
    let map: Tensor<f64> = init_normal(&mut rng, in_dim, dim, 1.0 / (in_dim as f64).sqrt());

    let t = x.len();
    let windows = t.div_ceil(DOWNSAMPLE);
    let mut stats = Tensor::<f64>::zeros(windows, in_dim);
    for u in 0..windows {
        let (lo, hi) = (u * DOWNSAMPLE, ((u + 1) * DOWNSAMPLE).min(t));
        let n = (hi - lo) as f64;
        let row = stats.row_mut(u);
        for f in lo..hi {
            let fr: Vec<f64> = (0..4).map(|c| x.frames.get(f, c).as_f64()).collect();
            for c in 0..4 {
                row[c] += fr[c] / n;
            }
            row[4] += fr[2].hypot(fr[3]) / n;
        }
        row[5] = 1.0;
        row[STAT_DIM..].copy_from_slice(&caption);
    }
    Ok(stats.matmul(&map)?.cast())
}
