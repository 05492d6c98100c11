//! Minimal reverse-mode differentiation over 2-D matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse. Parameters are borrowed, never copied, and their
//! gradients are keyed by [`ParamId`].

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::scalar::Scalar;
use crate::spatial::{self, MapShape, WindowGeom};

static NEXT_PARAM: AtomicUsize = AtomicUsize::new(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// A learnable matrix with a process-unique identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    id: ParamId,
    pub value: Array2<T>,
}

impl<T> Param<T> {
    pub fn new(value: Array2<T>) -> Self {
        Self {
            id: ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed)),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    DivScalar(Var, Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    SumAll(Var),
    GroupMean(Var, usize),
    ConcatCols(Vec<Var>),
    Im2Col(Var, WindowGeom),
    AvgPool(Var, MapShape, usize, usize),
    MaxPool(Var, WindowGeom, Vec<usize>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        probs: Vec<Array2<T>>,
    },
    LayerNorm(Var, Vec<T>),
    BceLogits(Var, Vec<T>),
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Array2<T>>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Clipping bound applied to probabilities inside the BCE loss.
pub const BCE_EPS: f64 = 1e-7;

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy of one clipped probability.
pub fn bce<T: Scalar>(q: T, y: T) -> T {
    let eps = T::c(BCE_EPS);
    let q = q.max(eps).min(T::one() - eps);
    -(y * q.ln() + (T::one() - y) * (T::one() - q).ln())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(scores: &mut Array2<T>) {
    for mut row in scores.outer_iter_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: T = row.iter().copied().sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Grouped multi-head scaled dot-product attention. Rows of `q` (and of
/// `k`, `v`) are split into `groups` equal contiguous blocks that never
/// attend to each other; columns split into `heads` equal slices.
pub fn grouped_attention<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    groups: usize,
    heads: usize,
) -> (Array2<T>, Vec<Array2<T>>) {
    let (tq, tk) = (q.nrows() / groups, k.nrows() / groups);
    let dk = q.ncols() / heads;
    let dv = v.ncols() / heads;
    let scale = T::one() / T::c(dk as f64).sqrt();
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    let mut probs = Vec::with_capacity(groups * heads);
    for g in 0..groups {
        for h in 0..heads {
            let qh = q.slice(s![g * tq..(g + 1) * tq, h * dk..(h + 1) * dk]);
            let kh = k.slice(s![g * tk..(g + 1) * tk, h * dk..(h + 1) * dk]);
            let vh = v.slice(s![g * tk..(g + 1) * tk, h * dv..(h + 1) * dv]);
            let mut p = qh.dot(&kh.t()) * scale;
            softmax_rows(&mut p);
            out.slice_mut(s![g * tq..(g + 1) * tq, h * dv..(h + 1) * dv])
                .assign(&p.dot(&vh));
            probs.push(p);
        }
    }
    (out, probs)
}

fn layer_norm_forward<T: Scalar>(x: &Array2<T>) -> (Array2<T>, Vec<T>) {
    let eps = T::c(1e-5);
    let n = T::c(x.ncols() as f64);
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in out.outer_iter_mut() {
        let mean = row.sum() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
        inv_std.push(inv);
    }
    (out, inv_std)
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Array2<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Array2<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Array2<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    /// A value whose gradient is reported through [`Gradients::var`].
    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// A trainable parameter; its gradient is keyed by its id.
    pub fn param(&mut self, p: &'a Param<T>) -> Var {
        let v = self.push(Cow::Borrowed(&p.value), Op::Leaf, true);
        self.nodes[v.0].param = Some(p.id);
        v
    }

    /// A parameter used read-only.
    pub fn frozen(&mut self, p: &'a Param<T>) -> Var {
        self.constant_ref(&p.value)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.derived(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.derived(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.derived(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.derived(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.derived(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a) * c;
        self.derived(out, Op::Scale(a, c), &[a])
    }

    /// Divides every entry of `a` by the `1×1` value `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let d = self.scalar(s);
        let out = self.value(a) / d;
        self.derived(out, Op::DivScalar(a, s), &[a, s])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(T::zero()));
        self.derived(out, Op::Relu(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(softplus);
        self.derived(out, Op::Softplus(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.derived(out, Op::Sigmoid(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.derived(out, Op::SumAll(a), &[a])
    }

    /// Mean of each of `groups` equal contiguous row blocks.
    pub fn group_mean(&mut self, a: Var, groups: usize) -> Var {
        let x = self.value(a);
        let per = x.nrows() / groups;
        let mut out = Array2::zeros((groups, x.ncols()));
        for g in 0..groups {
            let m = x
                .slice(s![g * per..(g + 1) * per, ..])
                .mean_axis(Axis(0))
                .expect("non-empty group");
            out.row_mut(g).assign(&m);
        }
        self.derived(out, Op::GroupMean(a, groups), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("equal row counts");
        self.derived(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn im2col(&mut self, a: Var, geom: WindowGeom) -> Var {
        let out = spatial::im2col(self.value(a), &geom);
        self.derived(out, Op::Im2Col(a, geom), &[a])
    }

    pub fn avg_pool(&mut self, a: Var, shape: MapShape, out_h: usize, out_w: usize) -> Var {
        let out = spatial::avg_pool(self.value(a), &shape, out_h, out_w);
        self.derived(out, Op::AvgPool(a, shape, out_h, out_w), &[a])
    }

    pub fn max_pool(&mut self, a: Var, geom: WindowGeom) -> Var {
        let (out, arg) = spatial::max_pool(self.value(a), &geom);
        self.derived(out, Op::MaxPool(a, geom, arg), &[a])
    }

    /// Scaled dot-product attention; see [`grouped_attention`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize, heads: usize) -> Var {
        let (out, probs) = grouped_attention(
            self.value(q).view(),
            self.value(k).view(),
            self.value(v).view(),
            groups,
            heads,
        );
        self.derived(
            out,
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let (out, inv) = layer_norm_forward(self.value(a));
        self.derived(out, Op::LayerNorm(a, inv), &[a])
    }

    /// Mean BCE of `sigmoid(logits)` (an `n×1` column) against `targets`.
    /// The gradient is the exact `(sigmoid(z) − y) / n` of the unclipped
    /// loss.
    pub fn bce_logits(&mut self, logits: Var, targets: &[T]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.len(), targets.len(), "one target per logit");
        let n = T::c(targets.len() as f64);
        let loss = z
            .iter()
            .zip(targets)
            .map(|(&z, &y)| bce(sigmoid(z), y))
            .sum::<T>()
            / n;
        self.derived(
            Array2::from_elem((1, 1), loss),
            Op::BceLogits(logits, targets.to_vec()),
            &[logits],
        )
    }

    /// Backpropagates from `root`, seeding with ones (the gradient of the
    /// sum of its entries).
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(self.value(root).raw_dim()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = HashMap::new();
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if let (Some(id), Some(g)) = (node.param, g.as_ref()) {
                params
                    .entry(id)
                    .and_modify(|acc: &mut Array2<T>| *acc += g)
                    .or_insert_with(|| g.clone());
            }
        }
        Gradients {
            params,
            vars: grads,
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Array2<T>,
        g: &Array2<T>,
        grads: &mut [Option<Array2<T>>],
    ) {
        let mut acc = |v: Var, delta: Array2<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot => *slot = Some(delta),
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                if self.wants(*b) {
                    acc(*b, g.mapv(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.wants(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.wants(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::DivScalar(a, s) => {
                let d = self.scalar(*s);
                if self.wants(*a) {
                    acc(*a, g / d);
                }
                if self.wants(*s) {
                    let num = (g * self.value(*a)).sum();
                    acc(*s, Array2::from_elem((1, 1), -num / (d * d)));
                }
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |d, &x| {
                    if x <= T::zero() {
                        *d = T::zero()
                    }
                });
                acc(*a, d);
            }
            Op::Softplus(a) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |d, &x| *d *= sigmoid(x));
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                d.zip_mut_with(out, |d, &y| *d = *d * y * (T::one() - y));
                acc(*a, d);
            }
            Op::SumAll(a) => {
                acc(*a, Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]));
            }
            Op::GroupMean(a, groups) => {
                let x = self.value(*a);
                let per = x.nrows() / groups;
                let inv = T::one() / T::c(per as f64);
                let mut d = Array2::zeros(x.raw_dim());
                for r in 0..x.nrows() {
                    d.row_mut(r).assign(&(&g.row(r / per) * inv));
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.wants(p) {
                        acc(p, g.slice(s![.., col..col + w]).to_owned());
                    }
                    col += w;
                }
            }
            Op::Im2Col(a, geom) => acc(*a, spatial::col2im(g, geom)),
            Op::AvgPool(a, shape, oh, ow) => {
                acc(*a, spatial::avg_pool_backward(g, shape, *oh, *ow))
            }
            Op::MaxPool(a, geom, arg) => acc(*a, spatial::max_pool_backward(g, geom, arg)),
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (tq, tk) = (qv.nrows() / groups, kv.nrows() / groups);
                let dk = qv.ncols() / heads;
                let dv = vv.ncols() / heads;
                let scale = T::one() / T::c(dk as f64).sqrt();
                let mut gq = Array2::zeros(qv.raw_dim());
                let mut gk = Array2::zeros(kv.raw_dim());
                let mut gv = Array2::zeros(vv.raw_dim());
                for grp in 0..*groups {
                    for h in 0..*heads {
                        let p = &probs[grp * heads + h];
                        let (qr, kr) = (grp * tq..(grp + 1) * tq, grp * tk..(grp + 1) * tk);
                        let (hk, hv) = (h * dk..(h + 1) * dk, h * dv..(h + 1) * dv);
                        let go = g.slice(s![qr.clone(), hv.clone()]);
                        let vh = vv.slice(s![kr.clone(), hv.clone()]);
                        gv.slice_mut(s![kr.clone(), hv.clone()])
                            .assign(&p.t().dot(&go));
                        let dp = go.dot(&vh.t());
                        // softmax Jacobian: dS = P ⊙ (dP − rowsum(dP ⊙ P))
                        let mut ds = &dp * p;
                        let rowsum = ds.sum_axis(Axis(1));
                        ds = p * &(&dp - &rowsum.insert_axis(Axis(1)));
                        ds *= scale;
                        let qh = qv.slice(s![qr.clone(), hk.clone()]);
                        let kh = kv.slice(s![kr.clone(), hk.clone()]);
                        gq.slice_mut(s![qr.clone(), hk.clone()])
                            .assign(&ds.dot(&kh));
                        gk.slice_mut(s![kr.clone(), hk.clone()])
                            .assign(&ds.t().dot(&qh));
                    }
                }
                acc(*q, gq);
                acc(*k, gk);
                acc(*v, gv);
            }
            Op::LayerNorm(a, inv_std) => {
                let n = T::c(out.ncols() as f64);
                let mut d = Array2::zeros(out.raw_dim());
                for r in 0..out.nrows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let mean_g = gr.sum() / n;
                    let mean_gy = gr.iter().zip(y.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
                    let mut dr = d.row_mut(r);
                    for c in 0..y.len() {
                        dr[c] = inv_std[r] * (gr[c] - mean_g - y[c] * mean_gy);
                    }
                }
                acc(*a, d);
            }
            Op::BceLogits(z, targets) => {
                let n = T::c(targets.len() as f64);
                let zv = self.value(*z);
                let mut d = Array2::zeros(zv.raw_dim());
                for ((dz, &zz), &y) in d.iter_mut().zip(zv.iter()).zip(targets) {
                    *dz = g[[0, 0]] * (sigmoid(zz) - y) / n;
                }
                acc(*z, d);
            }
        }
    }
}

pub struct Gradients<T> {
    params: HashMap<ParamId, Array2<T>>,
    vars: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, p: &Param<T>) -> Option<&Array2<T>> {
        self.params.get(&p.id)
    }

    pub fn var(&self, v: Var) -> Option<&Array2<T>> {
        self.vars[v.0].as_ref()
    }

    pub fn into_params(self) -> HashMap<ParamId, Array2<T>> {
        self.params
    }
}
