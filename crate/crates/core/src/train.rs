//! Training loops for the causal VAE and the diffusion transformer.
//!
//! Both loops are single-threaded and fully keyed: the minibatch order,
//! reparameterisation noise, noise levels and condition drops are functions
//! of `(seed, step)`, so a fixed number of steps gives the same weights.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{adaptive_lambda, mcos_graph, mdms_graph, semantic_oracle, PROJECTION};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::diffusion::{df_loss_graph, staircase_levels, DfBatch};
use crate::dit::{DitParams, TextCondition};
use crate::error::{Error, Result};
use crate::nn::{init_weight, Graph, ParamTree, Tensor};
use crate::optim::AdamW;
use crate::rng::{mix_seed, DrawKind, RngKey};
use crate::scalar::Scalar;
use crate::vae::{
    decode, encode, encode_graph, decode_graph, vae_loss_graph, LatentSequence, LatentStats, VaeParams,
    ENCODER_HEAD_WEIGHT,
};

/// Salts separating the seed streams of the two stages.
const VAE_SALT: u64 = 0x7AE;
const DIT_SALT: u64 = 0xD17;

/// Yields minibatches of dataset indices, reshuffling every epoch.
struct Batcher {
    seed: u64,
    n: usize,
    batch: usize,
    epoch: usize,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(seed: u64, n: usize, batch: usize) -> Self {
        let mut b = Self { seed, n, batch: batch.min(n), epoch: 0, order: Vec::new(), pos: 0 };
        b.shuffle();
        b
    }

    fn shuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, self.epoch as u64]));
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.n {
            self.epoch += 1;
            self.shuffle();
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

fn stack<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    Tensor::concat_rows(parts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeStepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub align: f64,
    pub lambda: f64,
    pub grad_norm: f64,
}

/// Semantic-oracle features for every training sample.
pub fn dataset_features<S: Scalar>(cfg: &RunConfig, data: &Dataset<S>) -> Result<Vec<Tensor<S>>> {
    let a = &cfg.vae.align;
    data.samples
        .iter()
        .map(|s| semantic_oracle(&s.motion, &s.caption.tokens(), a.oracle_seed, a.feature_dim))
        .collect()
}

/// Trains the VAE (with the alignment projection stored at `align.w` when
/// alignment is enabled). `log` sees every step.
pub fn train_vae<S: Scalar>(
    cfg: &RunConfig,
    data: &Dataset<S>,
    mut log: impl FnMut(&VaeStepLog),
) -> Result<VaeParams<S>> {
    let stage = &cfg.train.vae;
    let vcfg = &cfg.vae;
    let acfg = &vcfg.align;
    let seed = mix_seed(&[cfg.seed, VAE_SALT]);
    let mut vae = VaeParams::<S>::init(vcfg.clone(), seed)?;
    if cfg.train.align {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 1]));
        vae.params.insert(PROJECTION, init_weight(&mut rng, vcfg.latent_dim, acfg.feature_dim, 1.0));
    }
    let features = if cfg.train.align { dataset_features(cfg, data)? } else { Vec::new() };
    let t = data.spec.frames;
    let n_lat = t / 4;
    let mut opt = AdamW::new(stage.optim.clone(), &vae.params);
    let mut batches = Batcher::new(mix_seed(&[seed, 2]), data.len(), stage.batch);
    let base = RngKey::new(seed, DrawKind::Reparam);

    for step in 0..stage.steps {
        let idx = batches.next();
        let b = idx.len();
        let x = stack(&idx.iter().map(|&i| &data.samples[i].motion.frames).collect::<Vec<_>>())?;
        let noise = Tensor::from_vec(b * n_lat, vcfg.latent_dim, base.derive(step as u64).normals(b * n_lat * vcfg.latent_dim))?;
        let feats = if cfg.train.align {
            Some(stack(&idx.iter().map(|&i| &features[i]).collect::<Vec<_>>())?)
        } else {
            None
        };

        let mut g = Graph::new();
        let bound = g.bind(&vae.params, true);
        let xv = g.constant_ref(&x);
        let (mu, lv) = encode_graph(&mut g, &bound, vcfg, xv, t)?;
        let half = g.scale(lv, S::lit(0.5));
        let std = g.exp(half);
        let nv = g.constant_ref(&noise);
        let spread = g.mul(std, nv)?;
        let z = g.add(mu, spread)?;
        let xh = decode_graph(&mut g, &bound, z, n_lat)?;
        let (total, recon, kl) = vae_loss_graph(&mut g, xv, xh, mu, lv, vcfg.beta)?;

        let gr = g.backward(total)?;
        let mut grads = g.param_grads(&gr, &bound);
        let (mut align_val, mut lambda) = (0.0, 0.0);
        if let Some(f) = feats.as_ref() {
            let fv = g.constant_ref(f);
            let w = bound.get(PROJECTION)?;
            let zp = g.matmul(mu, w)?;
            let lc = mcos_graph(&mut g, zp, fv, acfg.m1)?;
            let source = if acfg.mdms_projected { zp } else { mu };
            let mut parts = Vec::with_capacity(b);
            for i in 0..b {
                let zi = g.slice_rows(source, i * n_lat, (i + 1) * n_lat)?;
                let fi = g.slice_rows(fv, i * n_lat, (i + 1) * n_lat)?;
                parts.push(mdms_graph(&mut g, zi, fi, acfg.m2)?);
            }
            let mut ld = parts[0];
            for &p in &parts[1..] {
                ld = g.add(ld, p)?;
            }
            let ld = g.scale(ld, S::lit(1.0 / b as f64));
            let la = g.add(lc, ld)?;
            align_val = g.scalar(la).as_f64();
            let ga = g.backward(la)?;
            let align_grads = g.param_grads(&ga, &bound);
            lambda = adaptive_lambda(
                grads.get(ENCODER_HEAD_WEIGHT)?.norm().as_f64(),
                align_grads.get(ENCODER_HEAD_WEIGHT)?.norm().as_f64(),
                acfg,
            );
            grads.add_scaled(&align_grads, S::lit(lambda));
        }
        let (total_v, recon_v, kl_v) = (g.scalar(total).as_f64(), g.scalar(recon).as_f64(), g.scalar(kl).as_f64());
        drop(g);

        let lr = stage.optim.lr_at(step, stage.steps);
        let grad_norm = opt
            .step(&mut vae.params, &mut grads, lr)
            .map_err(|e| Error::NonFinite(format!("vae step {step}: {e}")))?;
        log(&VaeStepLog { step, lr, total: total_v, recon: recon_v, kl: kl_v, align: align_val, lambda, grad_norm });
    }
    Ok(vae)
}

/// Encoder means for every sample.
pub fn encode_dataset<S: Scalar>(vae: &VaeParams<S>, data: &Dataset<S>) -> Result<Vec<Tensor<S>>> {
    data.samples.iter().map(|s| Ok(encode(&s.motion, vae)?.mu)).collect()
}

/// Mean squared error of `decode(mu(x))` against `x` over the dataset.
pub fn reconstruction_mse<S: Scalar>(vae: &VaeParams<S>, data: &Dataset<S>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in &data.samples {
        let mu = encode(&s.motion, vae)?.mu;
        let out = decode(&LatentSequence::new(mu), vae, s.motion.fps)?;
        for (a, b) in out.frames.data().iter().zip(s.motion.frames.data()) {
            let d = a.as_f64() - b.as_f64();
            sum += d * d;
        }
        n += s.motion.frames.len();
    }
    Ok(sum / n.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DitStepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Diffusion transformer with the latent normalisation it was trained under.
#[derive(Debug, Clone)]
pub struct DitModel<S> {
    pub dit: DitParams<S>,
    pub stats: LatentStats<S>,
}

/// Checkpoint paths holding the latent normalisation.
pub const STATS_MEAN: &str = "latent.mean";
pub const STATS_STD: &str = "latent.std";

impl<S: Scalar> DitModel<S> {
    /// Weights and statistics as one tree for saving.
    pub fn to_tree(&self) -> ParamTree<S> {
        let mut t = self.dit.params.clone();
        t.insert(STATS_MEAN, self.stats.mean.clone());
        t.insert(STATS_STD, self.stats.std.clone());
        t
    }

    pub fn from_tree(cfg: &RunConfig, mut tree: ParamTree<S>) -> Result<Self> {
        let mean = tree.remove(STATS_MEAN).ok_or_else(|| Error::MissingParam(STATS_MEAN.into()))?;
        let std = tree.remove(STATS_STD).ok_or_else(|| Error::MissingParam(STATS_STD.into()))?;
        let reference = DitParams::<S>::init(cfg.dit.clone(), 0)?;
        check_layout(&reference.params, &tree)?;
        Ok(Self { dit: DitParams { config: cfg.dit.clone(), params: tree }, stats: LatentStats { mean, std } })
    }
}

/// Loads VAE weights after checking every expected tensor is present.
pub fn vae_from_tree<S: Scalar>(cfg: &RunConfig, tree: ParamTree<S>) -> Result<VaeParams<S>> {
    let mut reference = VaeParams::<S>::init(cfg.vae.clone(), 0)?.params;
    if tree.contains(PROJECTION) {
        reference.insert(PROJECTION, Tensor::zeros(cfg.vae.latent_dim, cfg.vae.align.feature_dim));
    }
    check_layout(&reference, &tree)?;
    Ok(VaeParams { config: cfg.vae.clone(), params: tree })
}

fn check_layout<S: Scalar>(reference: &ParamTree<S>, got: &ParamTree<S>) -> Result<()> {
    for (path, t) in reference.iter() {
        let g = got.get(path)?;
        if g.shape() != t.shape() {
            return Err(Error::Shape(format!("checkpoint `{path}` has shape {:?}, expected {:?}", g.shape(), t.shape())));
        }
    }
    if let Some(extra) = got.paths().find(|p| !reference.contains(p)) {
        return Err(Error::Shape(format!("checkpoint has unexpected tensor `{extra}`")));
    }
    Ok(())
}

/// Trains the DiT with the diffusion-forcing objective on normalised
/// encoder means of the dataset.
pub fn train_dit<S: Scalar>(
    cfg: &RunConfig,
    vae: &VaeParams<S>,
    data: &Dataset<S>,
    mut log: impl FnMut(&DitStepLog),
) -> Result<DitModel<S>> {
    let stage = &cfg.train.dit;
    let seed = mix_seed(&[cfg.seed, DIT_SALT]);
    let mus = encode_dataset(vae, data)?;
    let stats = LatentStats::fit(&mus.iter().collect::<Vec<_>>(), cfg.train.latent_std_floor)?;
    let latents: Vec<Tensor<S>> = mus.iter().map(|z| stats.normalize(z)).collect();
    let conds: Vec<TextCondition> = data.samples.iter().map(|s| s.caption.into()).collect();
    let schedule = cfg.diffusion.build()?;

    let mut dit = DitParams::<S>::init(cfg.dit.clone(), seed)?;
    let mut opt = AdamW::new(stage.optim.clone(), &dit.params);
    let mut batches = Batcher::new(mix_seed(&[seed, 2]), data.len(), stage.batch);
    let base = RngKey::new(seed, DrawKind::Train);

    for step in 0..stage.steps {
        let idx = batches.next();
        let zs: Vec<&Tensor<S>> = idx.iter().map(|&i| &latents[i]).collect();
        let cs: Vec<TextCondition> = idx.iter().map(|&i| conds[i].clone()).collect();
        let key = base.derive(step as u64);
        let levels: Vec<Vec<usize>> = zs
            .iter()
            .enumerate()
            .map(|(i, z)| {
                let k = key.derive(i as u64);
                if k.derive(1).kind(DrawKind::Level).uniform() < cfg.train.staircase_prob {
                    staircase_levels(z.rows(), schedule.steps(), k.derive(2))
                } else {
                    (0..z.rows()).map(|t| k.kind(DrawKind::Level).frame(t).level(schedule.steps())).collect()
                }
            })
            .collect();
        let batch = DfBatch::with_levels(&zs, &cs, &schedule, key, cfg.diffusion.cond_drop, &levels)?;
        let mut g = Graph::new();
        let bound = g.bind(&dit.params, true);
        let loss = df_loss_graph(&mut g, &bound, &dit, &batch)?;
        let gl = g.backward(loss)?;
        let mut grads = g.param_grads(&gl, &bound);
        let loss_v = g.scalar(loss).as_f64();
        drop(g);
        let lr = stage.optim.lr_at(step, stage.steps);
        let grad_norm = opt
            .step(&mut dit.params, &mut grads, lr)
            .map_err(|e| Error::NonFinite(format!("dit step {step}: {e}")))?;
        log(&DitStepLog { step, lr, loss: loss_v, grad_norm });
    }
    Ok(DitModel { dit, stats })
}
