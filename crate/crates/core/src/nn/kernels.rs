//! Attention and rotary-position kernels.
//!
//! These are pure functions on [`Tensor`]s. The graph ops in
//! [`crate::nn::graph`] call the same forward code and add analytic backward
//! passes on top.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

pub const ROPE_BASE: f64 = 10_000.0;

/// Key range `[lo, hi)` visible to each query row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    ranges: Vec<(usize, usize)>,
}

impl AttnMask {
    pub fn from_ranges(ranges: Vec<(usize, usize)>) -> Self {
        Self { ranges }
    }

    /// Lower-triangular mask: row `i` sees keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        Self::causal_with_offset(n, 0)
    }

    /// Query row `i` is absolute position `offset + i` over `offset + n` keys.
    pub fn causal_with_offset(n: usize, offset: usize) -> Self {
        Self { ranges: (0..n).map(|i| (0, offset + i + 1)).collect() }
    }

    /// Independent causal masks for sequences stacked row-wise.
    pub fn block_causal(seq_lens: &[usize]) -> Self {
        let mut ranges = Vec::with_capacity(seq_lens.iter().sum());
        let mut start = 0;
        for &len in seq_lens {
            for i in 0..len {
                ranges.push((start, start + i + 1));
            }
            start += len;
        }
        Self { ranges }
    }

    /// Every query row sees all `n_keys` keys.
    pub fn full(n_queries: usize, n_keys: usize) -> Self {
        Self { ranges: vec![(0, n_keys); n_queries] }
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    fn validate(&self, n_queries: usize, n_keys: usize) -> Result<()> {
        if self.ranges.len() != n_queries {
            return Err(Error::Shape(format!(
                "mask has {} rows for {} queries",
                self.ranges.len(),
                n_queries
            )));
        }
        for (i, &(lo, hi)) in self.ranges.iter().enumerate() {
            if lo >= hi || hi > n_keys {
                return Err(Error::Shape(format!(
                    "mask row {i} range {lo}..{hi} invalid for {n_keys} keys"
                )));
            }
        }
        Ok(())
    }
}

/// Softmax weights kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct AttnProbs<S> {
    pub probs: Vec<S>,
    pub row_base: Vec<usize>,
    pub per_head: usize,
}

impl<S> AttnProbs<S> {
    #[inline]
    pub fn offset(&self, head: usize, row: usize) -> usize {
        head * self.per_head + self.row_base[row]
    }
}

pub(crate) fn check_heads(dim: usize, heads: usize) -> Result<usize> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
    }
    Ok(dim / heads)
}

pub(crate) fn attention_forward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    mask: &AttnMask,
) -> Result<(Tensor<S>, AttnProbs<S>)> {
    let dim = q.cols();
    if k.cols() != dim || v.cols() != dim || k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "attention q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let dh = check_heads(dim, heads)?;
    mask.validate(q.rows(), k.rows())?;
    let scale = S::one() / S::lit(dh as f64).sqrt();

    let mut row_base = Vec::with_capacity(q.rows());
    let mut total = 0;
    for &(lo, hi) in mask.ranges() {
        row_base.push(total);
        total += hi - lo;
    }
    let mut saved = AttnProbs { probs: vec![S::zero(); total * heads], row_base, per_head: total };
    let mut out = Tensor::zeros(q.rows(), dim);

    for h in 0..heads {
        let c0 = h * dh;
        for (i, &(lo, hi)) in mask.ranges().iter().enumerate() {
            let qi = &q.row(i)[c0..c0 + dh];
            let off = saved.offset(h, i);
            let p = &mut saved.probs[off..off + (hi - lo)];
            let mut max = S::neg_infinity();
            for (slot, j) in p.iter_mut().zip(lo..hi) {
                let kj = &k.row(j)[c0..c0 + dh];
                let mut s = S::zero();
                for (&a, &b) in qi.iter().zip(kj) {
                    s += a * b;
                }
                s *= scale;
                *slot = s;
                if s > max {
                    max = s;
                }
            }
            let mut denom = S::zero();
            for slot in p.iter_mut() {
                *slot = (*slot - max).exp();
                denom += *slot;
            }
            for slot in p.iter_mut() {
                *slot /= denom;
            }
            let oi = &mut out.row_mut(i)[c0..c0 + dh];
            for (&pj, j) in p.iter().zip(lo..hi) {
                let vj = &v.row(j)[c0..c0 + dh];
                for (o, &b) in oi.iter_mut().zip(vj) {
                    *o += pj * b;
                }
            }
        }
    }
    Ok((out, saved))
}

/// Gradients of the attention output with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    mask: &AttnMask,
    saved: &AttnProbs<S>,
    d_out: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let dim = q.cols();
    let dh = dim / heads;
    let scale = S::one() / S::lit(dh as f64).sqrt();
    let mut dq = Tensor::zeros(q.rows(), dim);
    let mut dk = Tensor::zeros(k.rows(), dim);
    let mut dv = Tensor::zeros(v.rows(), dim);
    let mut dp = Vec::new();

    for h in 0..heads {
        let c0 = h * dh;
        for (i, &(lo, hi)) in mask.ranges().iter().enumerate() {
            let off = saved.offset(h, i);
            let p = &saved.probs[off..off + (hi - lo)];
            let doi = &d_out.row(i)[c0..c0 + dh];
            dp.clear();
            let mut weighted = S::zero();
            for (&pj, j) in p.iter().zip(lo..hi) {
                let vj = &v.row(j)[c0..c0 + dh];
                let mut s = S::zero();
                for (&a, &b) in doi.iter().zip(vj) {
                    s += a * b;
                }
                dp.push(s);
                weighted += pj * s;
                let dvj = &mut dv.row_mut(j)[c0..c0 + dh];
                for (d, &g) in dvj.iter_mut().zip(doi) {
                    *d += pj * g;
                }
            }
            let qi: Vec<S> = q.row(i)[c0..c0 + dh].to_vec();
            for ((&pj, &dpj), j) in p.iter().zip(&dp).zip(lo..hi) {
                let ds = pj * (dpj - weighted) * scale;
                if ds == S::zero() {
                    continue;
                }
                let kj = &k.row(j)[c0..c0 + dh];
                let dqi = &mut dq.row_mut(i)[c0..c0 + dh];
                for (d, &b) in dqi.iter_mut().zip(kj) {
                    *d += ds * b;
                }
                let dkj = &mut dk.row_mut(j)[c0..c0 + dh];
                for (d, &a) in dkj.iter_mut().zip(&qi) {
                    *d += ds * a;
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Multi-head attention where output row `t` sees key rows `0..=t` only.
pub fn causal_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
) -> Result<Tensor<S>> {
    if q.rows() != k.rows() {
        return Err(Error::Shape(format!("q has {} rows, k has {}", q.rows(), k.rows())));
    }
    Ok(attention_forward(q, k, v, heads, &AttnMask::causal(q.rows()))?.0)
}

/// Masked multi-head attention with an explicit per-row key range.
pub fn masked_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    mask: &AttnMask,
) -> Result<Tensor<S>> {
    Ok(attention_forward(q, k, v, heads, mask)?.0)
}

/// Rotates each head's feature pairs `(2i, 2i+1)` by `position * base^(-2i/head_dim)`.
/// `inverse` applies the opposite rotation, which is also the adjoint.
pub(crate) fn rope_heads<S: Scalar>(
    x: &Tensor<S>,
    positions: &[usize],
    heads: usize,
    inverse: bool,
) -> Result<Tensor<S>> {
    let dh = check_heads(x.cols(), heads)?;
    if dh % 2 != 0 {
        return Err(Error::Config(format!("rotary embedding needs an even head dim, got {dh}")));
    }
    if positions.len() != x.rows() {
        return Err(Error::Shape(format!(
            "{} positions for {} rows",
            positions.len(),
            x.rows()
        )));
    }
    let half = dh / 2;
    let freqs: Vec<f64> =
        (0..half).map(|i| ROPE_BASE.powf(-2.0 * i as f64 / dh as f64)).collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for (i, &f) in freqs.iter().enumerate() {
            let angle = sign * pos as f64 * f;
            let (s, c) = (S::lit(angle.sin()), S::lit(angle.cos()));
            for h in 0..heads {
                let a = h * dh + 2 * i;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * c - x1 * s;
                row[a + 1] = x0 * s + x1 * c;
            }
        }
    }
    Ok(out)
}

/// Rotary positional encoding over the whole row (a single head).
pub fn apply_rope<S: Scalar>(x: &Tensor<S>, positions: &[usize]) -> Result<Tensor<S>> {
    if x.cols() % 2 != 0 {
        return Err(Error::Config(format!("rotary embedding needs an even dim, got {}", x.cols())));
    }
    rope_heads(x, positions, 1, false)
}
