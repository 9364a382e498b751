//! Causal variational autoencoder with 4x temporal downsampling.
//!
//! Every layer is a left-padded 1-D convolution (kernel 3), so latent step
//! `u` only sees motion frames `0..4u+4` and decoded frame `t` only sees
//! latent steps `0..=t/4`. Two stride-2 stages provide the 4x ratio.
//!
//! Layer layout per side: 7 plain convolutions and 2 residual blocks.
//!
//! ```text
//! encoder: stem, conv_a, down1(/2), res1, conv_b, down2(/2), res2, conv_c, head -> (mu, logvar)
//! decoder: stem, conv_a, res1, up1(x2), conv_b, res2, up2(x2), conv_c, head -> frames
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::AlignConfig;
use crate::error::{Error, Result};
use crate::nn::{init_weight, Bound, Graph, ParamTree, Tensor, Var};
use crate::rng::RngKey;
use crate::scalar::Scalar;

pub const DOWNSAMPLE: usize = 4;
pub const KERNEL: usize = 3;
pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

/// Raw motion frames, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence<S> {
    pub frames: Tensor<S>,
    pub fps: f64,
}

impl<S: Scalar> MotionSequence<S> {
    pub fn new(frames: Tensor<S>, fps: f64) -> Self {
        Self { frames, fps }
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Diagonal Gaussian posterior over latent steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution<S> {
    pub mu: Tensor<S>,
    pub logvar: Tensor<S>,
    /// Frames of left padding added to reach a multiple of 4.
    pub pad: usize,
}

/// Latent frames, `ceil(T/4)` x `latent_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence<S> {
    pub z: Tensor<S>,
    pub pad: usize,
}

impl<S: Scalar> LatentSequence<S> {
    pub fn new(z: Tensor<S>) -> Self {
        Self { z, pad: 0 }
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub motion_dim: usize,
    pub channels: usize,
    pub latent_dim: usize,
    /// KL weight.
    pub beta: f64,
    /// Motion-semantic alignment applied while training the encoder.
    pub align: AlignConfig,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { motion_dim: 4, channels: 64, latent_dim: 16, beta: 1e-3, align: AlignConfig::default() }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.motion_dim == 0 || self.channels == 0 || self.latent_dim == 0 {
            return Err(Error::Config("vae dims must be >= 1".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("vae.beta must be >= 0, got {}", self.beta)));
        }
        self.align.validate()
    }
}

/// Encoder (`enc.*`) and decoder (`dec.*`) weights plus the KL weight.
#[derive(Debug, Clone)]
pub struct VaeParams<S> {
    pub config: VaeConfig,
    pub params: ParamTree<S>,
}

const ENC_PLAIN: [(&str, usize); 7] = [
    ("stem", 1),
    ("conv_a", 1),
    ("down1", 2),
    ("conv_b", 1),
    ("down2", 2),
    ("conv_c", 1),
    ("head", 1),
];
const DEC_PLAIN: [&str; 7] = ["stem", "conv_a", "up1", "conv_b", "up2", "conv_c", "head"];

fn add_conv<S: Scalar>(
    p: &mut ParamTree<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    gain: f64,
) {
    p.insert(format!("{name}.w"), init_weight(rng, KERNEL * cin, cout, gain));
    p.insert(format!("{name}.b"), Tensor::zeros(1, cout));
}

impl<S: Scalar> VaeParams<S> {
    pub fn init(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, c, z) = (config.motion_dim, config.channels, config.latent_dim);
        let relu_gain = 2f64.sqrt();
        let mut p = ParamTree::new();
        for (name, _) in ENC_PLAIN {
            let cin = if name == "stem" { d } else { c };
            let (cout, gain) = if name == "head" { (2 * z, 1.0) } else { (c, relu_gain) };
            add_conv(&mut p, &mut rng, &format!("enc.{name}"), cin, cout, gain);
        }
        for name in DEC_PLAIN {
            let cin = if name == "stem" { z } else { c };
            let (cout, gain) = if name == "head" { (d, 1.0) } else { (c, relu_gain) };
            add_conv(&mut p, &mut rng, &format!("dec.{name}"), cin, cout, gain);
        }
        for side in ["enc", "dec"] {
            for block in ["res1", "res2"] {
                add_conv(&mut p, &mut rng, &format!("{side}.{block}.conv1"), c, c, relu_gain);
                add_conv(&mut p, &mut rng, &format!("{side}.{block}.conv2"), c, c, 0.5);
            }
        }
        Ok(Self { config, params: p })
    }

    pub fn beta(&self) -> f64 {
        self.config.beta
    }
}

/// Path of the encoder's final layer weight (used for gradient balancing).
pub const ENCODER_HEAD_WEIGHT: &str = "enc.head.w";

fn conv<S: Scalar>(
    g: &mut Graph<'_, S>,
    b: &Bound,
    name: &str,
    x: Var,
    seq_len: usize,
    stride: usize,
    relu: bool,
) -> Result<Var> {
    let u = g.causal_unfold(x, KERNEL, stride, seq_len)?;
    let y = g.linear(u, b.get(&format!("{name}.w"))?, Some(b.get(&format!("{name}.b"))?))?;
    Ok(if relu { g.relu(y) } else { y })
}

fn res_block<S: Scalar>(
    g: &mut Graph<'_, S>,
    b: &Bound,
    name: &str,
    x: Var,
    seq_len: usize,
) -> Result<Var> {
    let h = conv(g, b, &format!("{name}.conv1"), x, seq_len, 1, true)?;
    let h = conv(g, b, &format!("{name}.conv2"), h, seq_len, 1, false)?;
    let y = g.add(x, h)?;
    Ok(g.relu(y))
}

/// Encoder over `n` stacked sequences of `seq_len` frames (multiple of 4).
/// Returns `(mu, logvar)` with `n * seq_len / 4` rows each.
pub fn encode_graph<S: Scalar>(
    g: &mut Graph<'_, S>,
    b: &Bound,
    config: &VaeConfig,
    x: Var,
    seq_len: usize,
) -> Result<(Var, Var)> {
    if seq_len % DOWNSAMPLE != 0 {
        return Err(Error::Shape(format!("encoder sequence length {seq_len} not a multiple of 4")));
    }
    let mut h = x;
    let mut len = seq_len;
    for (name, stride) in ENC_PLAIN {
        let full = format!("enc.{name}");
        match name {
            "head" => {
                let out = conv(g, b, &full, h, len, 1, false)?;
                let z = config.latent_dim;
                let mu = g.slice_cols(out, 0, z)?;
                let lv = g.slice_cols(out, z, 2 * z)?;
                let lv = g.clamp(lv, S::lit(LOGVAR_MIN), S::lit(LOGVAR_MAX));
                return Ok((mu, lv));
            }
            _ => {
                h = conv(g, b, &full, h, len, stride, true)?;
                len /= stride;
                if name == "down1" {
                    h = res_block(g, b, "enc.res1", h, len)?;
                } else if name == "down2" {
                    h = res_block(g, b, "enc.res2", h, len)?;
                }
            }
        }
    }
    unreachable!("encoder layer list ends with the head")
}

/// Decoder over `n` stacked latent sequences of `latent_len` steps.
pub fn decode_graph<S: Scalar>(
    g: &mut Graph<'_, S>,
    b: &Bound,
    z: Var,
    latent_len: usize,
) -> Result<Var> {
    let mut h = z;
    let mut len = latent_len;
    for name in DEC_PLAIN {
        let full = format!("dec.{name}");
        match name {
            "head" => return conv(g, b, &full, h, len, 1, false),
            "up1" | "up2" => {
                let block = if name == "up1" { "dec.res1" } else { "dec.res2" };
                h = res_block(g, b, block, h, len)?;
                h = g.repeat_rows(h, 2);
                len *= 2;
                h = conv(g, b, &full, h, len, 1, true)?;
            }
            _ => h = conv(g, b, &full, h, len, 1, true)?,
        }
    }
    unreachable!("decoder layer list ends with the head")
}

/// Left-pads by repeating the first frame up to a multiple of 4.
pub fn pad_to_multiple<S: Scalar>(frames: &Tensor<S>) -> (Tensor<S>, usize) {
    let t = frames.rows();
    let pad = (DOWNSAMPLE - t % DOWNSAMPLE) % DOWNSAMPLE;
    if pad == 0 {
        return (frames.clone(), 0);
    }
    let out = Tensor::from_fn(t + pad, frames.cols(), |r, c| {
        frames.get(r.saturating_sub(pad), c)
    });
    (out, pad)
}

/// Latent length law: `ceil(T/4)`.
pub fn latent_len(frames: usize) -> usize {
    frames.div_ceil(DOWNSAMPLE)
}

pub fn encode<S: Scalar>(x: &MotionSequence<S>, params: &VaeParams<S>) -> Result<LatentDistribution<S>> {
    if x.len() < DOWNSAMPLE {
        return Err(Error::InputTooShort { frames: x.len(), min: DOWNSAMPLE });
    }
    if x.dim() != params.config.motion_dim {
        return Err(Error::Shape(format!(
            "motion has {} channels, model expects {}",
            x.dim(),
            params.config.motion_dim
        )));
    }
    let (padded, pad) = pad_to_multiple(&x.frames);
    let mut g = Graph::new();
    let b = g.bind(&params.params, false);
    let xv = g.constant(padded);
    let len = g.shape(xv).0;
    let (mu, lv) = encode_graph(&mut g, &b, &params.config, xv, len)?;
    Ok(LatentDistribution { mu: g.value(mu).clone(), logvar: g.value(lv).clone(), pad })
}

/// `z = mu + exp(logvar / 2) * noise`.
pub fn reparameterize<S: Scalar>(dist: &LatentDistribution<S>, noise: &Tensor<S>) -> Result<LatentSequence<S>> {
    if noise.shape() != dist.mu.shape() || dist.logvar.shape() != dist.mu.shape() {
        return Err(Error::Shape(format!(
            "reparameterize: mu {:?}, logvar {:?}, noise {:?}",
            dist.mu.shape(),
            dist.logvar.shape(),
            noise.shape()
        )));
    }
    let mut z = dist.mu.clone();
    for ((o, &lv), &n) in z.data_mut().iter_mut().zip(dist.logvar.data()).zip(noise.data()) {
        *o += (lv * S::lit(0.5)).exp() * n;
    }
    Ok(LatentSequence { z, pad: dist.pad })
}

/// Reparameterized sample with noise drawn from `key`.
pub fn sample_latent<S: Scalar>(dist: &LatentDistribution<S>, key: RngKey) -> Result<LatentSequence<S>> {
    let (r, c) = dist.mu.shape();
    let noise = Tensor::from_vec(r, c, key.normals(r * c))?;
    reparameterize(dist, &noise)
}

/// Decodes `4 * U` frames, dropping any left padding recorded in `z`.
pub fn decode<S: Scalar>(z: &LatentSequence<S>, params: &VaeParams<S>, fps: f64) -> Result<MotionSequence<S>> {
    if z.is_empty() {
        return Err(Error::InputTooShort { frames: 0, min: 1 });
    }
    if z.z.cols() != params.config.latent_dim {
        return Err(Error::Shape(format!(
            "latent has {} channels, model expects {}",
            z.z.cols(),
            params.config.latent_dim
        )));
    }
    let mut g = Graph::new();
    let b = g.bind(&params.params, false);
    let zv = g.constant_ref(&z.z);
    let out = decode_graph(&mut g, &b, zv, z.len())?;
    let frames = g.value(out);
    let frames = frames.slice_rows(z.pad.min(frames.rows()), frames.rows());
    Ok(MotionSequence::new(frames, fps))
}

/// Per-channel affine map bringing encoder means to roughly unit scale
/// before diffusion.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats<S> {
    pub mean: Tensor<S>,
    pub std: Tensor<S>,
}

impl<S: Scalar> LatentStats<S> {
    pub fn identity(dim: usize) -> Self {
        Self { mean: Tensor::zeros(1, dim), std: Tensor::full(1, dim, S::one()) }
    }

    /// Channel means and standard deviations over all rows of `latents`;
    /// each std is floored at `floor` times the largest one.
    pub fn fit(latents: &[&Tensor<S>], floor: f64) -> Result<Self> {
        let d = latents.first().map(|z| z.cols()).ok_or_else(|| Error::Shape("no latents".into()))?;
        let mut n = 0usize;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for z in latents {
            if z.cols() != d {
                return Err(Error::Shape("latent widths differ".into()));
            }
            for r in 0..z.rows() {
                for (c, &v) in z.row(r).iter().enumerate() {
                    sum[c] += v.as_f64();
                    sq[c] += v.as_f64() * v.as_f64();
                }
            }
            n += z.rows();
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt()).collect();
        let top = std.iter().copied().fold(0.0, f64::max).max(1e-12);
        Ok(Self {
            mean: Tensor::from_vec(1, d, mean.into_iter().map(S::lit).collect())?,
            std: Tensor::from_vec(1, d, std.into_iter().map(|s| S::lit(s.max(floor * top))).collect())?,
        })
    }

    pub fn normalize(&self, z: &Tensor<S>) -> Tensor<S> {
        Tensor::from_fn(z.rows(), z.cols(), |r, c| (z.get(r, c) - self.mean.get(0, c)) / self.std.get(0, c))
    }

    pub fn denormalize(&self, z: &Tensor<S>) -> Tensor<S> {
        Tensor::from_fn(z.rows(), z.cols(), |r, c| z.get(r, c) * self.std.get(0, c) + self.mean.get(0, c))
    }
}

/// Loss value with its two components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLoss<S> {
    pub total: S,
    pub recon: S,
    pub kl: S,
}

/// Element-mean MSE plus `beta` times the element-mean closed-form KL
/// divergence to a standard normal.
pub fn vae_loss<S: Scalar>(
    x: &Tensor<S>,
    x_hat: &Tensor<S>,
    dist: &LatentDistribution<S>,
    beta: f64,
) -> Result<VaeLoss<S>> {
    if x.shape() != x_hat.shape() || dist.mu.shape() != dist.logvar.shape() {
        return Err(Error::Shape(format!(
            "vae_loss: x {:?}, x_hat {:?}, mu {:?}, logvar {:?}",
            x.shape(),
            x_hat.shape(),
            dist.mu.shape(),
            dist.logvar.shape()
        )));
    }
    for (name, t) in [("x", x), ("x_hat", x_hat), ("mu", &dist.mu), ("logvar", &dist.logvar)] {
        if !t.all_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    let mut g = Graph::new();
    let xv = g.constant_ref(x);
    let xh = g.constant_ref(x_hat);
    let mu = g.constant_ref(&dist.mu);
    let lv = g.constant_ref(&dist.logvar);
    let (total, recon, kl) = vae_loss_graph(&mut g, xv, xh, mu, lv, beta)?;
    Ok(VaeLoss { total: g.scalar(total), recon: g.scalar(recon), kl: g.scalar(kl) })
}

pub fn recon_loss_graph<S: Scalar>(g: &mut Graph<'_, S>, x: Var, x_hat: Var) -> Result<Var> {
    let diff = g.sub(x_hat, x)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// `0.5 * mean(mu^2 + exp(logvar) - 1 - logvar)`.
pub fn kl_graph<S: Scalar>(g: &mut Graph<'_, S>, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = g.square(mu);
    let var = g.exp(logvar);
    let t = g.add(mu2, var)?;
    let t = g.sub(t, logvar)?;
    let t = g.add_scalar(t, -S::one());
    let m = g.mean(t);
    Ok(g.scale(m, S::lit(0.5)))
}

/// Returns `(total, recon, kl)` nodes.
pub fn vae_loss_graph<S: Scalar>(
    g: &mut Graph<'_, S>,
    x: Var,
    x_hat: Var,
    mu: Var,
    logvar: Var,
    beta: f64,
) -> Result<(Var, Var, Var)> {
    let recon = recon_loss_graph(g, x, x_hat)?;
    let kl = kl_graph(g, mu, logvar)?;
    let weighted = g.scale(kl, S::lit(beta));
    let total = g.add(recon, weighted)?;
    Ok((total, recon, kl))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use crate::rng::DrawKind;
    use rand::Rng;

    fn small(seed: u64) -> VaeParams<f64> {
        VaeParams::init(VaeConfig { motion_dim: 4, channels: 8, latent_dim: 3, ..VaeConfig::default() }, seed).unwrap()
    }

    fn motion(t: usize, seed: u64) -> MotionSequence<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MotionSequence::new(Tensor::from_fn(t, 4, |_, _| rng.random_range(-1.0..1.0)), 20.0)
    }

    #[test]
    fn latent_length_law() {
        let p = small(1);
        for t in 4..23 {
            let d = encode(&motion(t, t as u64), &p).unwrap();
            assert_eq!(d.mu.rows(), latent_len(t));
            assert_eq!(d.mu.cols(), 3);
        }
        assert_eq!(encode(&motion(16, 0), &p).unwrap().mu.rows(), 4);
        assert!(matches!(encode(&motion(3, 0), &p), Err(Error::InputTooShort { .. })));
    }

    #[test]
    fn encoder_ignores_future_frames() {
        let p = small(2);
        let x = motion(16, 3);
        let base = encode(&x, &p).unwrap();
        let mut y = x.clone();
        for t in 12..16 {
            y.frames.row_mut(t).iter_mut().for_each(|v| *v += 5.0);
        }
        let pert = encode(&y, &p).unwrap();
        assert_eq!(base.mu.slice_rows(0, 3), pert.mu.slice_rows(0, 3));
        assert_ne!(base.mu.row(3), pert.mu.row(3));
        // truncated input gives the same prefix latents
        let pre = encode(&MotionSequence::new(x.frames.slice_rows(0, 8), 20.0), &p).unwrap();
        assert!(pre.mu.max_abs_diff(&base.mu.slice_rows(0, 2)) <= 1e-12);
    }

    #[test]
    fn decoder_ignores_future_latents() {
        let p = small(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = LatentSequence::new(Tensor::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0)));
        let out = decode(&z, &p, 20.0).unwrap();
        assert_eq!(out.len(), 16);
        let mut z2 = z.clone();
        z2.z.row_mut(3).iter_mut().for_each(|v| *v -= 2.0);
        let out2 = decode(&z2, &p, 20.0).unwrap();
        assert_eq!(out.frames.slice_rows(0, 12), out2.frames.slice_rows(0, 12));
        assert_ne!(out.frames.row(12), out2.frames.row(12));
    }

    #[test]
    fn zero_input_is_finite() {
        let p = small(6);
        let d = encode(&MotionSequence::new(Tensor::zeros(16, 4), 20.0), &p).unwrap();
        assert_eq!(d.mu.shape(), (4, 3));
        assert!(d.mu.all_finite() && d.logvar.all_finite());
    }

    #[test]
    fn padding_round_trip_length() {
        let p = small(7);
        let x = motion(10, 8);
        let d = encode(&x, &p).unwrap();
        assert_eq!(d.pad, 2);
        let z = reparameterize(&d, &Tensor::zeros(3, 3)).unwrap();
        assert_eq!(decode(&z, &p, 20.0).unwrap().len(), 10);
    }

    #[test]
    fn reparameterize_edges() {
        let mu = Tensor::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let d = LatentDistribution { mu: mu.clone(), logvar: Tensor::full(2, 2, 0.3), pad: 0 };
        assert_eq!(reparameterize(&d, &Tensor::zeros(2, 2)).unwrap().z, mu);
        let tight = LatentDistribution { logvar: Tensor::full(2, 2, LOGVAR_MIN), ..d.clone() };
        let z = reparameterize(&tight, &Tensor::full(2, 2, 3.0)).unwrap();
        assert!(z.z.max_abs_diff(&mu) < 1e-6);
        assert!(reparameterize(&d, &Tensor::zeros(1, 2)).is_err());
    }

    #[test]
    fn reparameterize_moments() {
        let d: LatentDistribution<f64> = LatentDistribution {
            mu: Tensor::from_vec(1, 2, vec![0.7, -1.3]).unwrap(),
            logvar: Tensor::from_vec(1, 2, vec![-0.5, 0.8]).unwrap(),
            pad: 0,
        };
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for i in 0..n {
            let z = sample_latent(&d, RngKey::new(11, DrawKind::Reparam).step(i)).unwrap();
            for c in 0..2 {
                sum[c] += z.z.get(0, c);
                sq[c] += z.z.get(0, c).powi(2);
            }
        }
        for c in 0..2 {
            let var = d.logvar.get(0, c).exp();
            let mean = sum[c] / n as f64;
            let emp_var = sq[c] / n as f64 - mean * mean;
            assert!((mean - d.mu.get(0, c)).abs() < 3.0 * (var / n as f64).sqrt());
            // variance of the sample variance is 2 var^2 / n for a Gaussian
            assert!((emp_var - var).abs() < 3.0 * var * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn loss_anchors() {
        let x: Tensor<f64> = Tensor::from_vec(1, 1, vec![0.4]).unwrap();
        let zero = LatentDistribution { mu: Tensor::zeros(1, 1), logvar: Tensor::zeros(1, 1), pad: 0 };
        assert_eq!(vae_loss(&x, &x, &zero, 1.0).unwrap().total, 0.0);
        let one = LatentDistribution { mu: Tensor::full(1, 1, 1.0), ..zero.clone() };
        let l = vae_loss(&x, &x, &one, 1.0).unwrap();
        assert!((l.kl - 0.5).abs() < 1e-15);
        let bad = Tensor::from_vec(1, 1, vec![f64::NAN]).unwrap();
        assert!(matches!(vae_loss(&x, &bad, &zero, 1.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn loss_matches_straight_line_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut r = |rows: usize, cols: usize| -> Tensor<f64> {
            Tensor::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
        };
        let (x, xh, mu, lv) = (r(8, 4), r(8, 4), r(2, 3), r(2, 3));
        let beta = 0.7;
        let mut mse = 0.0;
        for i in 0..x.len() {
            mse += (x.data()[i] - xh.data()[i]).powi(2);
        }
        mse /= x.len() as f64;
        let mut kl = 0.0;
        for i in 0..mu.len() {
            let (m, l) = (mu.data()[i], lv.data()[i]);
            kl += 0.5 * (m * m + l.exp() - 1.0 - l);
        }
        kl /= mu.len() as f64;
        let got = vae_loss(&x, &xh, &LatentDistribution { mu, logvar: lv, pad: 0 }, beta).unwrap();
        assert!((got.total - (mse + beta * kl)).abs() <= 1e-10);
        assert!(got.kl >= 0.0);
    }

    #[test]
    fn full_objective_gradient() {
        let vae = small(13);
        let x = motion(8, 14);
        let noise = Tensor::from_vec(2, 3, RngKey::new(3, DrawKind::Reparam).normals(6)).unwrap();
        let report = grad_check(
            |p: &ParamTree<f64>| {
                let mut g = Graph::new();
                let b = g.bind(p, true);
                let xv = g.constant_ref(&x.frames);
                let (mu, lv) = encode_graph(&mut g, &b, &vae.config, xv, 8)?;
                let half = g.scale(lv, 0.5);
                let std = g.exp(half);
                let nz = g.constant(noise.clone());
                let eps = g.mul(std, nz)?;
                let z = g.add(mu, eps)?;
                let xh = decode_graph(&mut g, &b, z, 2)?;
                let (total, _, _) = vae_loss_graph(&mut g, xv, xh, mu, lv, 1.0)?;
                let grads = g.backward(total)?;
                Ok((g.scalar(total), g.param_grads(&grads, &b)))
            },
            &vae.params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }
}
