//! Causal diffusion transformer predicting per-frame noise.
//!
//! Each layer runs causal self-attention with rotary positions, then
//! cross-attention to caption token embeddings, then an MLP. Self-attention
//! and MLP are modulated by adaLN from the frame's own noise level; the
//! cross-attention branch is pre-norm with a zero-initialized output map.
//! All three residual branches start as the identity.
//!
//! Inference goes through [`forward_cached`], which appends the keys and
//! values of frozen frames to a [`KvCache`] so later frames attend to them
//! without recomputation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ToyCaption, NULL_TOKEN, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::nn::{init_normal, init_weight, AttnMask, Bound, Graph, ParamTree, Tensor, Var};
use crate::rng::{DrawKind, RngKey};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DitConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub mlp_ratio: usize,
    pub latent_dim: usize,
    pub vocab: usize,
    /// Largest noise level the model is conditioned on.
    pub max_level: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self::toy(16)
    }
}

impl DitConfig {
    pub fn toy(latent_dim: usize) -> Self {
        Self { layers: 4, heads: 4, hidden: 128, mlp_ratio: 2, latent_dim, vocab: VOCAB_SIZE, max_level: 1000 }
    }

    pub fn paper(latent_dim: usize) -> Self {
        Self { layers: 8, heads: 4, hidden: 512, mlp_ratio: 4, latent_dim, vocab: VOCAB_SIZE, max_level: 1000 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.latent_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("dit sizes must be >= 1".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "dit.hidden {} not divisible by dit.heads {}",
                self.hidden, self.heads
            )));
        }
        if (self.hidden / self.heads) % 2 != 0 || self.hidden % 2 != 0 {
            return Err(Error::Config("dit head dim must be even for rotary positions".into()));
        }
        if self.vocab <= NULL_TOKEN {
            return Err(Error::Config(format!("dit.vocab must exceed {NULL_TOKEN}")));
        }
        Ok(())
    }
}

/// Caption tokens fed to cross-attention.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TextCondition {
    pub tokens: Vec<usize>,
    pub null_flag: bool,
}

impl TextCondition {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self { tokens, null_flag: false }
    }

    pub fn caption(c: ToyCaption) -> Self {
        Self::new(c.tokens().to_vec())
    }
}

impl From<ToyCaption> for TextCondition {
    fn from(c: ToyCaption) -> Self {
        Self::caption(c)
    }
}

/// The reserved unconditional input: a single learned null token.
pub fn make_null_condition() -> TextCondition {
    TextCondition { tokens: vec![NULL_TOKEN], null_flag: true }
}

/// Whether training drops the condition for draw `key`.
pub fn drop_condition(key: RngKey, p: f64) -> bool {
    debug_assert_eq!(key.kind, DrawKind::Drop);
    key.uniform() < p
}

#[derive(Debug, Clone)]
pub struct DitParams<S> {
    pub config: DitConfig,
    pub params: ParamTree<S>,
}

impl<S: Scalar> DitParams<S> {
    /// Standard initialization: adaLN maps, the cross-attention output map and
    /// the final projection start at zero, so the untrained model predicts 0.
    pub fn init(config: DitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, z, f) = (config.hidden, config.latent_dim, config.hidden * config.mlp_ratio);
        let mut p = ParamTree::new();
        p.insert("in.w", init_weight(&mut rng, z, h, 1.0));
        p.insert("in.b", Tensor::zeros(1, h));
        p.insert("t.w1", init_weight(&mut rng, h, h, 1.0));
        p.insert("t.b1", Tensor::zeros(1, h));
        p.insert("t.w2", init_weight(&mut rng, h, h, 1.0));
        p.insert("t.b2", Tensor::zeros(1, h));
        p.insert("embed", init_normal(&mut rng, config.vocab, h, 1.0));
        for l in 0..config.layers {
            let pre = format!("layers.{l}");
            p.insert(format!("{pre}.ada.w"), Tensor::zeros(h, 6 * h));
            p.insert(format!("{pre}.ada.b"), Tensor::zeros(1, 6 * h));
            for m in ["q", "k", "v", "o"] {
                p.insert(format!("{pre}.attn.{m}"), init_weight(&mut rng, h, h, 1.0));
            }
            for m in ["q", "k", "v"] {
                p.insert(format!("{pre}.cross.{m}"), init_weight(&mut rng, h, h, 1.0));
            }
            p.insert(format!("{pre}.cross.o"), Tensor::zeros(h, h));
            p.insert(format!("{pre}.mlp.w1"), init_weight(&mut rng, h, f, 2f64.sqrt()));
            p.insert(format!("{pre}.mlp.b1"), Tensor::zeros(1, f));
            p.insert(format!("{pre}.mlp.w2"), init_weight(&mut rng, f, h, 1.0));
            p.insert(format!("{pre}.mlp.b2"), Tensor::zeros(1, h));
        }
        p.insert("final.ada.w", Tensor::zeros(h, 2 * h));
        p.insert("final.ada.b", Tensor::zeros(1, 2 * h));
        p.insert("out.w", Tensor::zeros(h, z));
        p.insert("out.b", Tensor::zeros(1, z));
        Ok(Self { config, params: p })
    }

    /// Adds Gaussian noise of std `std` to every parameter. Used to get a
    /// non-degenerate untrained model for structural tests.
    pub fn jitter(mut self, seed: u64, std: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in self.params.iter_mut() {
            let (r, c) = t.shape();
            let n: Tensor<S> = init_normal(&mut rng, r, c, std);
            t.add_assign(&n);
        }
        self
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }
}

/// Sinusoidal embedding of integer levels, `levels.len()` x `dim`
/// (cosines in the first half, sines in the second).
pub fn timestep_embedding<S: Scalar>(levels: &[usize], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    Tensor::from_fn(levels.len(), dim, |r, c| {
        let i = if c < half { c } else { c - half };
        if i >= half {
            return S::zero();
        }
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let a = levels[r] as f64 * freq;
        S::lit(if c < half { a.cos() } else { a.sin() })
    })
}

/// Per-row layout of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardLayout {
    pub positions: Vec<usize>,
    pub levels: Vec<usize>,
    /// Ranges into `[cached keys; window keys]`.
    pub self_mask: AttnMask,
    /// Concatenated token ids of every condition in the pass.
    pub tokens: Vec<usize>,
    /// Ranges into `tokens`.
    pub cross_mask: AttnMask,
}

impl ForwardLayout {
    /// `n_seq` independent sequences of `seq_len` frames stacked row-wise,
    /// one condition per sequence.
    pub fn batch(n_seq: usize, seq_len: usize, levels: Vec<usize>, conds: &[TextCondition]) -> Result<Self> {
        if conds.len() != n_seq || levels.len() != n_seq * seq_len {
            return Err(Error::Shape(format!(
                "{} conditions and {} levels for {n_seq} x {seq_len} frames",
                conds.len(),
                levels.len()
            )));
        }
        let mut tokens = Vec::new();
        let mut cross = Vec::with_capacity(n_seq * seq_len);
        for c in conds {
            let lo = tokens.len();
            tokens.extend_from_slice(&c.tokens);
            cross.extend(std::iter::repeat_n((lo, tokens.len()), seq_len));
        }
        Ok(Self {
            positions: (0..n_seq * seq_len).map(|i| i % seq_len).collect(),
            levels,
            self_mask: AttnMask::block_causal(&vec![seq_len; n_seq]),
            tokens,
            cross_mask: AttnMask::from_ranges(cross),
        })
    }

    /// Window of frames at positions `offset..offset + n` after `offset`
    /// cached frames, each with its own condition.
    pub fn window(
        offset: usize,
        levels: Vec<usize>,
        conds: &[&TextCondition],
        horizon: Option<usize>,
    ) -> Result<Self> {
        let n = levels.len();
        if conds.len() != n {
            return Err(Error::Shape(format!("{} conditions for {n} frames", conds.len())));
        }
        let mut tokens = Vec::new();
        let mut seen: Vec<(&TextCondition, (usize, usize))> = Vec::new();
        let mut cross = Vec::with_capacity(n);
        for &c in conds {
            let range = match seen.iter().find(|(s, _)| *s == c) {
                Some(&(_, r)) => r,
                None => {
                    let lo = tokens.len();
                    tokens.extend_from_slice(&c.tokens);
                    seen.push((c, (lo, tokens.len())));
                    (lo, tokens.len())
                }
            };
            cross.push(range);
        }
        let ranges = (0..n)
            .map(|i| {
                let end = offset + i + 1;
                let lo = horizon.map_or(0, |h| end.saturating_sub(h.max(1)));
                (lo, end)
            })
            .collect();
        Ok(Self {
            positions: (offset..offset + n).collect(),
            levels,
            self_mask: AttnMask::from_ranges(ranges),
            tokens,
            cross_mask: AttnMask::from_ranges(cross),
        })
    }
}

/// Keys (after rotation) and values of frozen frames, per layer.
#[derive(Debug, Clone)]
pub struct KvCache<S> {
    k: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(config: &DitConfig) -> Self {
        Self {
            k: vec![Tensor::zeros(0, config.hidden); config.layers],
            v: vec![Tensor::zeros(0, config.hidden); config.layers],
        }
    }

    /// Number of cached frames.
    pub fn len(&self) -> usize {
        self.k.first().map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn modulate<S: Scalar>(g: &mut Graph<'_, S>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let ln = g.layer_norm(x);
    let s = g.mul(ln, scale)?;
    let y = g.add(ln, s)?;
    g.add(y, shift)
}

fn check_levels(levels: &[usize], max: usize) -> Result<()> {
    match levels.iter().position(|&k| k > max) {
        Some(frame) => Err(Error::LevelOutOfRange { frame, level: levels[frame], max }),
        None => Ok(()),
    }
}

/// `silu(MLP(embed(levels)))`, shared by every adaLN map.
fn level_features<S: Scalar>(g: &mut Graph<'_, S>, b: &Bound, cfg: &DitConfig, levels: &[usize]) -> Result<Var> {
    let e = g.constant(timestep_embedding(levels, cfg.hidden));
    let h = g.linear(e, b.get("t.w1")?, Some(b.get("t.b1")?))?;
    let h = g.silu(h);
    let h = g.linear(h, b.get("t.w2")?, Some(b.get("t.b2")?))?;
    Ok(g.silu(h))
}

struct LayerOut {
    h: Var,
    k: Var,
    v: Var,
}

#[allow(clippy::too_many_arguments)]
fn layer<S: Scalar>(
    g: &mut Graph<'_, S>,
    b: &Bound,
    cfg: &DitConfig,
    l: usize,
    h: Var,
    temb: Var,
    tok: Var,
    layout: &ForwardLayout,
    cached: Option<(Var, Var)>,
) -> Result<LayerOut> {
    let p = |name: &str| b.get(&format!("layers.{l}.{name}"));
    let hd = cfg.hidden;
    let ada = g.linear(temb, p("ada.w")?, Some(p("ada.b")?))?;
    let mut m = Vec::with_capacity(6);
    for i in 0..6 {
        m.push(g.slice_cols(ada, i * hd, (i + 1) * hd)?);
    }

    // causal self-attention
    let x = modulate(g, h, m[0], m[1])?;
    let q = g.matmul(x, p("attn.q")?)?;
    let k = g.matmul(x, p("attn.k")?)?;
    let v = g.matmul(x, p("attn.v")?)?;
    let q = g.rope(q, layout.positions.clone(), cfg.heads)?;
    let k = g.rope(k, layout.positions.clone(), cfg.heads)?;
    let (k_all, v_all) = match cached {
        Some((ck, cv)) => (g.concat_rows(&[ck, k])?, g.concat_rows(&[cv, v])?),
        None => (k, v),
    };
    let a = g.attention(q, k_all, v_all, cfg.heads, layout.self_mask.clone())?;
    let a = g.matmul(a, p("attn.o")?)?;
    let a = g.mul(a, m[2])?;
    let h = g.add(h, a)?;

    // cross-attention to caption tokens
    let x = g.layer_norm(h);
    let q = g.matmul(x, p("cross.q")?)?;
    let ck = g.matmul(tok, p("cross.k")?)?;
    let cv = g.matmul(tok, p("cross.v")?)?;
    let a = g.attention(q, ck, cv, cfg.heads, layout.cross_mask.clone())?;
    let a = g.matmul(a, p("cross.o")?)?;
    let h = g.add(h, a)?;

    // MLP
    let x = modulate(g, h, m[3], m[4])?;
    let y = g.linear(x, p("mlp.w1")?, Some(p("mlp.b1")?))?;
    let y = g.silu(y);
    let y = g.linear(y, p("mlp.w2")?, Some(p("mlp.b2")?))?;
    let y = g.mul(y, m[5])?;
    let h = g.add(h, y)?;
    Ok(LayerOut { h, k, v })
}

/// Output of [`forward_graph`]: the noise prediction and each layer's
/// window keys and values.
pub struct GraphOut {
    pub eps: Var,
    pub kv: Vec<(Var, Var)>,
}

/// Full denoiser on the tape. `x` holds the window's noisy latents; `cache`
/// supplies keys and values for the frames before the window.
pub fn forward_graph<'a, S: Scalar>(
    g: &mut Graph<'a, S>,
    b: &Bound,
    cfg: &DitConfig,
    x: Var,
    layout: &ForwardLayout,
    cache: Option<&'a KvCache<S>>,
) -> Result<GraphOut> {
    let rows = g.shape(x).0;
    if rows == 0 {
        return Err(Error::InputTooShort { frames: 0, min: 1 });
    }
    if g.shape(x).1 != cfg.latent_dim || layout.levels.len() != rows || layout.positions.len() != rows {
        return Err(Error::Shape(format!(
            "dit input {:?} with {} levels, latent dim {}",
            g.shape(x),
            layout.levels.len(),
            cfg.latent_dim
        )));
    }
    if let Some(&t) = layout.tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::Config(format!("token id {t} outside vocabulary of {}", cfg.vocab)));
    }
    check_levels(&layout.levels, cfg.max_level)?;
    if let Some(c) = cache {
        if c.k.len() != cfg.layers {
            return Err(Error::Shape(format!("cache has {} layers, model {}", c.k.len(), cfg.layers)));
        }
    }

    let temb = level_features(g, b, cfg, &layout.levels)?;
    let table = b.get("embed")?;
    let tok = g.gather(table, &layout.tokens)?;
    let mut h = g.linear(x, b.get("in.w")?, Some(b.get("in.b")?))?;
    let mut kv = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let cached = match cache {
            Some(c) if !c.is_empty() => Some((g.constant_ref(&c.k[l]), g.constant_ref(&c.v[l]))),
            _ => None,
        };
        let out = layer(g, b, cfg, l, h, temb, tok, layout, cached)?;
        h = out.h;
        kv.push((out.k, out.v));
    }
    let fin = g.linear(temb, b.get("final.ada.w")?, Some(b.get("final.ada.b")?))?;
    let shift = g.slice_cols(fin, 0, cfg.hidden)?;
    let scale = g.slice_cols(fin, cfg.hidden, 2 * cfg.hidden)?;
    let x = modulate(g, h, shift, scale)?;
    let eps = g.linear(x, b.get("out.w")?, Some(b.get("out.b")?))?;
    Ok(GraphOut { eps, kv })
}

/// Noise prediction over a whole latent sequence with one condition.
pub fn dit_forward<S: Scalar>(
    z_noisy: &Tensor<S>,
    levels: &[usize],
    c: &TextCondition,
    params: &DitParams<S>,
) -> Result<Tensor<S>> {
    let conds = vec![c; z_noisy.rows()];
    let mut cache = KvCache::new(&params.config);
    forward_cached(params, &mut cache, z_noisy, levels, &conds, 0, None)
}

/// Runs the window `latents` (positions `cache.len()..`) against the cache
/// and returns its noise prediction. The keys and values of the first
/// `commit` window rows are then appended to the cache; those rows must be
/// final (frozen) since later windows will not recompute them.
pub fn forward_cached<S: Scalar>(
    params: &DitParams<S>,
    cache: &mut KvCache<S>,
    latents: &Tensor<S>,
    levels: &[usize],
    conds: &[&TextCondition],
    commit: usize,
    horizon: Option<usize>,
) -> Result<Tensor<S>> {
    if commit > latents.rows() {
        return Err(Error::Shape(format!("commit {commit} of {} rows", latents.rows())));
    }
    let layout = ForwardLayout::window(cache.len(), levels.to_vec(), conds, horizon)?;
    let (eps, new_kv) = {
        let mut g = Graph::new();
        let b = g.bind(&params.params, false);
        let x = g.constant_ref(latents);
        let out = forward_graph(&mut g, &b, &params.config, x, &layout, Some(&*cache))?;
        let eps = g.value(out.eps).clone();
        let new_kv: Vec<(Tensor<S>, Tensor<S>)> = if commit > 0 {
            out.kv
                .iter()
                .map(|&(k, v)| (g.value(k).slice_rows(0, commit), g.value(v).slice_rows(0, commit)))
                .collect()
        } else {
            Vec::new()
        };
        (eps, new_kv)
    };
    for (l, (k, v)) in new_kv.into_iter().enumerate() {
        cache.k[l].push_rows(&k)?;
        cache.v[l].push_rows(&v)?;
    }
    Ok(eps)
}

/// One transformer layer applied to hidden states `h`; exposed so the
/// adaLN identity start can be checked directly.
pub fn block_forward<S: Scalar>(
    h: &Tensor<S>,
    levels: &[usize],
    c: &TextCondition,
    params: &DitParams<S>,
    layer_idx: usize,
) -> Result<Tensor<S>> {
    let cfg = &params.config;
    if layer_idx >= cfg.layers || h.cols() != cfg.hidden || levels.len() != h.rows() {
        return Err(Error::Shape(format!("block_forward: layer {layer_idx}, h {:?}", h.shape())));
    }
    check_levels(levels, cfg.max_level)?;
    let layout = ForwardLayout::batch(1, h.rows(), levels.to_vec(), std::slice::from_ref(c))?;
    let mut g = Graph::new();
    let b = g.bind(&params.params, false);
    let hv = g.constant_ref(h);
    let temb = level_features(&mut g, &b, cfg, levels)?;
    let table = b.get("embed")?;
    let tok = g.gather(table, &layout.tokens)?;
    let out = layer(&mut g, &b, cfg, layer_idx, hv, temb, tok, &layout, None)?;
    Ok(g.value(out.h).clone())
}

/// `(shift, scale, gate)` triples for both modulated branches of a layer,
/// one row per frame: 6 x hidden columns.
pub fn adaln_modulation<S: Scalar>(levels: &[usize], params: &DitParams<S>, layer_idx: usize) -> Result<Tensor<S>> {
    let cfg = &params.config;
    check_levels(levels, cfg.max_level)?;
    let mut g = Graph::new();
    let b = g.bind(&params.params, false);
    let temb = level_features(&mut g, &b, cfg, levels)?;
    let ada = g.linear(
        temb,
        b.get(&format!("layers.{layer_idx}.ada.w"))?,
        Some(b.get(&format!("layers.{layer_idx}.ada.b"))?),
    )?;
    Ok(g.value(ada).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ShapeKind, SpeedKind};
    use rand::Rng;

    fn tiny() -> DitConfig {
        DitConfig { layers: 2, heads: 2, hidden: 8, mlp_ratio: 2, latent_dim: 3, vocab: VOCAB_SIZE, max_level: 20 }
    }

    fn model(seed: u64) -> DitParams<f64> {
        DitParams::init(tiny(), seed).unwrap().jitter(seed + 1, 0.3)
    }

    fn latents(rows: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, 3, |_, _| rng.random_range(-1.0..1.0))
    }

    fn cap() -> TextCondition {
        ToyCaption::new(ShapeKind::Zigzag, SpeedKind::Fast).into()
    }

    #[test]
    fn output_shape_and_untrained_zero() {
        let p = DitParams::<f64>::init(tiny(), 1).unwrap();
        let z = latents(5, 2);
        let out = dit_forward(&z, &[0, 3, 7, 20, 1], &cap(), &p).unwrap();
        assert_eq!(out.shape(), (5, 3));
        assert_eq!(out, Tensor::zeros(5, 3));
        assert!(matches!(
            dit_forward(&z, &[0, 3, 21, 2, 1], &cap(), &p),
            Err(Error::LevelOutOfRange { frame: 2, level: 21, .. })
        ));
        assert!(dit_forward(&Tensor::zeros(0, 3), &[], &cap(), &p).is_err());
    }

    #[test]
    fn toy_preset_size() {
        let p = DitParams::<f32>::init(DitConfig::toy(16), 0).unwrap();
        assert!(p.num_params() < 1_300_000, "{}", p.num_params());
    }

    #[test]
    fn zero_gates_give_identity_block() {
        let p = DitParams::<f64>::init(tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = Tensor::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0));
        assert_eq!(block_forward(&h, &[1, 2, 3, 4], &cap(), &p, 0).unwrap(), h);
    }

    #[test]
    fn equal_levels_equal_modulation() {
        let p = model(5);
        let m = adaln_modulation(&[4, 9, 4], &p, 1).unwrap();
        assert_eq!(m.row(0), m.row(2));
        assert_ne!(m.row(0), m.row(1));
    }

    #[test]
    fn level_change_affects_only_later_frames() {
        let p = model(6);
        let z = latents(8, 7);
        let mut k = vec![3, 5, 1, 0, 7, 2, 9, 4];
        let base = dit_forward(&z, &k, &cap(), &p).unwrap();
        k[5] = 11;
        let pert = dit_forward(&z, &k, &cap(), &p).unwrap();
        assert_eq!(base.slice_rows(0, 5), pert.slice_rows(0, 5));
        assert_ne!(base.row(5), pert.row(5));
    }

    #[test]
    fn latent_change_affects_only_later_frames() {
        let p = model(8);
        let z = latents(6, 9);
        let k = vec![3; 6];
        let base = dit_forward(&z, &k, &cap(), &p).unwrap();
        let mut z2 = z.clone();
        z2.row_mut(5).iter_mut().for_each(|v| *v += 1.0);
        let pert = dit_forward(&z2, &k, &cap(), &p).unwrap();
        assert_eq!(base.slice_rows(0, 5), pert.slice_rows(0, 5));
        assert_ne!(base.row(5), pert.row(5));
    }

    #[test]
    fn cache_matches_full_recompute() {
        let p = model(10);
        let z = latents(7, 11);
        let k = vec![0, 4, 2, 9, 0, 13, 5];
        let c = cap();
        let full = dit_forward(&z, &k, &c, &p).unwrap();
        let mut cache = KvCache::new(&p.config);
        for t in 0..7 {
            let row = z.slice_rows(t, t + 1);
            let out = forward_cached(&p, &mut cache, &row, &k[t..t + 1], &[&c], 1, None).unwrap();
            for j in 0..3 {
                let (a, b) = (out.get(0, j), full.get(t, j));
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3), "frame {t}: {a} vs {b}");
            }
        }
        assert_eq!(cache.len(), 7);
    }

    #[test]
    fn condition_matters_after_jitter() {
        let p = model(12);
        let z = latents(3, 13);
        let a = dit_forward(&z, &[2, 2, 2], &cap(), &p).unwrap();
        let b = dit_forward(&z, &[2, 2, 2], &make_null_condition(), &p).unwrap();
        assert_ne!(a, b);
        assert_eq!(make_null_condition(), make_null_condition());
    }

    #[test]
    fn drop_rate() {
        let n = 100_000;
        let drops = (0..n).filter(|&i| drop_condition(RngKey::new(3, DrawKind::Drop).step(i), 0.1)).count();
        let rate = drops as f64 / n as f64;
        assert!((rate - 0.1).abs() <= 0.01, "{rate}");
    }

    #[test]
    fn batch_layout_matches_separate_sequences() {
        let p = model(14);
        let (a, b) = (latents(4, 15), latents(4, 16));
        let ka = vec![1, 2, 3, 4];
        let kb = vec![5, 0, 5, 0];
        let ca = cap();
        let cb = make_null_condition();
        let xa = dit_forward(&a, &ka, &ca, &p).unwrap();
        let xb = dit_forward(&b, &kb, &cb, &p).unwrap();
        let stacked = Tensor::concat_rows(&[&a, &b]).unwrap();
        let layout = ForwardLayout::batch(2, 4, [ka, kb].concat(), &[ca, cb]).unwrap();
        let mut g = Graph::new();
        let bound = g.bind(&p.params, false);
        let x = g.constant_ref(&stacked);
        let out = forward_graph(&mut g, &bound, &p.config, x, &layout, None).unwrap();
        let both = g.value(out.eps);
        assert!(both.slice_rows(0, 4).max_abs_diff(&xa) <= 1e-12);
        assert!(both.slice_rows(4, 8).max_abs_diff(&xb) <= 1e-12);
    }
}
