//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every op as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and applies
//! each op's analytic adjoint. Parameters enter the tape by reference, so
//! binding a large [`ParamTree`] costs no copies.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::kernels::{self, AttnMask, AttnProbs};
use crate::nn::tensor::{gemm_into, ParamTree, Tensor};
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'a, S> {
    Owned(Tensor<S>),
    Borrowed(&'a Tensor<S>),
}

impl<S> Value<'_, S> {
    fn get(&self) -> &Tensor<S> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Relu(Var),
    Silu(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, S, S),
    LayerNorm { x: Var, inv_std: Vec<S> },
    RowNormalize { x: Var, norms: Vec<S> },
    Attention { q: Var, k: Var, v: Var, heads: usize, mask: AttnMask, saved: AttnProbs<S> },
    Rope { x: Var, positions: Vec<usize>, heads: usize },
    Unfold { x: Var, kernel: usize, stride: usize, seq_len: usize },
    RepeatRows { x: Var, factor: usize },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Transpose(Var),
}

struct Node<'a, S> {
    value: Value<'a, S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Parameter paths bound to graph leaves.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars.get(path).copied().ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Adjoints of every node reached from the backward root.
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub struct Graph<'a, S> {
    nodes: Vec<Node<'a, S>>,
}

impl<S: Scalar> Default for Graph<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<S> {
        self.nodes[v.0].value.get()
    }

    #[inline]
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> S {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor<S>) -> Var {
        self.nodes.push(Node { value: Value::Borrowed(t), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf holding its own value.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn param_ref(&mut self, t: &'a Tensor<S>, trainable: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
            requires_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds every entry of `params` as a leaf.
    pub fn bind(&mut self, params: &'a ParamTree<S>, trainable: bool) -> Bound {
        let mut vars = HashMap::with_capacity(params.len());
        for (path, t) in params.iter() {
            vars.insert(path.clone(), self.param_ref(t, trainable));
        }
        Bound { vars }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a @ b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(out, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a 1 x cols row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::Shape(format!("add_row: {:?} onto {r}x{c}", self.shape(row))));
        }
        let mut out = self.value(a).clone();
        let b = self.value(row).data().to_vec();
        for i in 0..r {
            for (o, &x) in out.row_mut(i).iter_mut().zip(&b) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(S::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x / (S::one() + (-x).exp()));
        self.push(out, Op::Silu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(S::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(S::abs);
        self.push(out, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(out, Op::Clamp(a, lo, hi), &[a])
    }

    /// Row-wise normalization to zero mean and unit variance, no affine.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        let n = S::lit(c as f64);
        let eps = S::lit(LAYER_NORM_EPS);
        let mut out = Tensor::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let is = S::one() / (var + eps).sqrt();
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    /// Divides each row by its Euclidean norm. Zero rows are an error.
    pub fn row_normalize(&mut self, a: Var, what: &'static str) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut out = Tensor::zeros(r, c);
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let n = x.row(i).iter().map(|&v| v * v).sum::<S>().sqrt();
            if !(n > S::zero()) {
                return Err(Error::ZeroNorm { what, row: i });
            }
            for (o, &v) in out.row_mut(i).iter_mut().zip(x.row(i)) {
                *o = v / n;
            }
            norms.push(n);
        }
        Ok(self.push(out, Op::RowNormalize { x: a, norms }, &[a]))
    }

    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttnMask,
    ) -> Result<Var> {
        let (out, saved) =
            kernels::attention_forward(self.value(q), self.value(k), self.value(v), heads, &mask)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, mask, saved }, &[q, k, v]))
    }

    pub fn rope(&mut self, x: Var, positions: Vec<usize>, heads: usize) -> Result<Var> {
        let out = kernels::rope_heads(self.value(x), &positions, heads, false)?;
        Ok(self.push(out, Op::Rope { x, positions, heads }, &[x]))
    }

    /// Causal im2col for stacked sequences of `seq_len` rows each.
    ///
    /// Output row `u` of a sequence gathers input rows
    /// `u*stride + stride - kernel .. u*stride + stride - 1` (zero below 0),
    /// so it never reads past the last input row of its stride window.
    pub fn causal_unfold(
        &mut self,
        x: Var,
        kernel: usize,
        stride: usize,
        seq_len: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = xv.shape();
        if seq_len == 0 || rows % seq_len != 0 || seq_len % stride != 0 || kernel == 0 {
            return Err(Error::Shape(format!(
                "unfold: {rows} rows, seq_len {seq_len}, stride {stride}, kernel {kernel}"
            )));
        }
        let n_seq = rows / seq_len;
        let out_len = seq_len / stride;
        let mut out = Tensor::zeros(n_seq * out_len, kernel * c);
        for b in 0..n_seq {
            for u in 0..out_len {
                let last = u * stride + stride - 1;
                let orow = out.row_mut(b * out_len + u);
                for j in 0..kernel {
                    let src = last as isize + j as isize + 1 - kernel as isize;
                    if src >= 0 {
                        orow[j * c..(j + 1) * c].copy_from_slice(xv.row(b * seq_len + src as usize));
                    }
                }
            }
        }
        Ok(self.push(out, Op::Unfold { x, kernel, stride, seq_len }, &[x]))
    }

    /// Repeats each row `factor` times (nearest-neighbour temporal upsampling).
    pub fn repeat_rows(&mut self, x: Var, factor: usize) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let mut out = Tensor::zeros(r * factor, c);
        for i in 0..r * factor {
            out.row_mut(i).copy_from_slice(xv.row(i / factor));
        }
        self.push(out, Op::RepeatRows { x, factor }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let c = self.shape(x).1;
        if start >= end || end > c {
            return Err(Error::Shape(format!("slice_cols {start}..{end} of {c}")));
        }
        let out = self.value(x).slice_cols(start, end);
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let r = self.shape(x).0;
        if start > end || end > r {
            return Err(Error::Shape(format!("slice_rows {start}..{end} of {r}")));
        }
        let out = self.value(x).slice_rows(start, end);
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&refs)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(Error::Shape(format!("gather id {id} of {} rows", t.rows())));
            }
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::full(1, 1, s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        self.push(Tensor::full(1, 1, s), Op::Mean(a), &[a])
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::from_fn(x.rows(), 1, |r, _| x.row(r).iter().copied().sum());
        self.push(out, Op::RowSum(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    /// `x @ w + b` with `b` optional.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a 1x1 `root`.
    pub fn backward(&self, root: Var) -> Result<Grads<S>> {
        if self.shape(root) != (1, 1) {
            return Err(Error::Shape(format!("backward root has shape {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(1, 1, S::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    /// Gradients for every bound path; unreached parameters get zeros.
    pub fn param_grads(&self, grads: &Grads<S>, bound: &Bound) -> ParamTree<S> {
        let mut out = ParamTree::new();
        for (path, &v) in bound.iter() {
            let g = match grads.get(v) {
                Some(g) => g.clone(),
                None => {
                    let (r, c) = self.shape(v);
                    Tensor::zeros(r, c)
                }
            };
            out.insert(path.clone(), g);
        }
        out
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<'a, S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let out = node.value.get();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm_into(g, false, bv, true, &mut da, S::zero());
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    gemm_into(av, true, g, false, &mut db, S::zero());
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulT(a, b) => {
                // out = a b^T: da = g b, db = g^T a
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm_into(g, false, bv, false, &mut da, S::zero());
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    gemm_into(g, true, av, false, &mut db, S::zero());
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*row) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, &x) in db.data_mut().iter_mut().zip(g.row(i)) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *row, db);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * *s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gx, x| if x > S::zero() { gx } else { S::zero() });
                self.accumulate(grads, *a, d);
            }
            Op::Silu(a) => {
                let d = g.zip_map(self.value(*a), |gx, x| {
                    let sig = S::one() / (S::one() + (-x).exp());
                    gx * sig * (S::one() + x * (S::one() - sig))
                });
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |gx, y| gx * y)),
            Op::Abs(a) => {
                let d = g.zip_map(self.value(*a), |gx, x| {
                    if x > S::zero() {
                        gx
                    } else if x < S::zero() {
                        -gx
                    } else {
                        S::zero()
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let d = g.zip_map(self.value(*a), |gx, x| gx * (x + x));
                self.accumulate(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let d = g.zip_map(self.value(*a), |gx, x| {
                    if x >= *lo && x <= *hi {
                        gx
                    } else {
                        S::zero()
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm { x, inv_std } => {
                let (r, c) = g.shape();
                let n = S::lit(c as f64);
                let mut dx = Tensor::zeros(r, c);
                for i in 0..r {
                    let (gy, y) = (g.row(i), out.row(i));
                    let mean_g = gy.iter().copied().sum::<S>() / n;
                    let mean_gy = gy.iter().zip(y).map(|(&a, &b)| a * b).sum::<S>() / n;
                    for ((d, &a), &b) in dx.row_mut(i).iter_mut().zip(gy).zip(y) {
                        *d = inv_std[i] * (a - mean_g - b * mean_gy);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::RowNormalize { x, norms } => {
                let (r, c) = g.shape();
                let mut dx = Tensor::zeros(r, c);
                for i in 0..r {
                    let (gy, y) = (g.row(i), out.row(i));
                    let dot = gy.iter().zip(y).map(|(&a, &b)| a * b).sum::<S>();
                    for ((d, &a), &b) in dx.row_mut(i).iter_mut().zip(gy).zip(y) {
                        *d = (a - b * dot) / norms[i];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Attention { q, k, v, heads, mask, saved } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *heads,
                    mask,
                    saved,
                    g,
                );
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Rope { x, positions, heads } => {
                let d = kernels::rope_heads(g, positions, *heads, true)
                    .expect("shape validated in forward");
                self.accumulate(grads, *x, d);
            }
            Op::Unfold { x, kernel, stride, seq_len } => {
                let (rows, c) = self.shape(*x);
                let n_seq = rows / seq_len;
                let out_len = seq_len / stride;
                let mut dx = Tensor::zeros(rows, c);
                for b in 0..n_seq {
                    for u in 0..out_len {
                        let last = u * stride + stride - 1;
                        let grow = g.row(b * out_len + u);
                        for j in 0..*kernel {
                            let src = last as isize + j as isize + 1 - *kernel as isize;
                            if src >= 0 {
                                let drow = dx.row_mut(b * seq_len + src as usize);
                                for (d, &v) in drow.iter_mut().zip(&grow[j * c..(j + 1) * c]) {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::RepeatRows { x, factor } => {
                let (r, c) = self.shape(*x);
                let mut dx = Tensor::zeros(r, c);
                for i in 0..g.rows() {
                    for (d, &v) in dx.row_mut(i / factor).iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.shape(*x);
                let mut dx = Tensor::zeros(r, c);
                for i in 0..r {
                    dx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.shape(*x);
                let mut dx = Tensor::zeros(r, c);
                for i in 0..g.rows() {
                    dx.row_mut(start + i).copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.shape(p).0;
                    if self.wants(p) {
                        self.accumulate(grads, p, g.slice_rows(start, start + n));
                    }
                    start += n;
                }
            }
            Op::Gather { table, ids } => {
                let (r, c) = self.shape(*table);
                let mut dt = Tensor::zeros(r, c);
                for (i, &id) in ids.iter().enumerate() {
                    for (d, &v) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(r, c, g.data()[0]));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                let n = S::lit((r * c).max(1) as f64);
                self.accumulate(grads, *a, Tensor::full(r, c, g.data()[0] / n));
            }
            Op::RowSum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
        }
    }
}
