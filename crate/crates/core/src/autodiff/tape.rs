//! Reverse-mode differentiation over a linear operation record.
//!
//! Every op appends a node holding its output value. `backward` walks the
//! nodes in reverse registration order and accumulates vector-Jacobian
//! products into the inputs. A tape records one forward pass; parameters
//! live in a [`ParamStore`] and are copied onto the tape on first use.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::autodiff::edges::EdgeList;
use crate::autodiff::params::{ParamGrads, ParamStore};
use crate::autodiff::tensor::{broadcast_offsets, broadcast_shapes, numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-supplied differentiable function with a hand-written backward.
///
/// `backward` returns one entry per input; `None` declares the input's
/// gradient blocked, and it then receives exactly zero.
pub trait CustomGrad<T: Scalar> {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    fn backward(
        &self,
        upstream: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    ConcatLast(Vec<Var>),
    SliceLast(Var, usize),
    Sum(Var),
    Exp(Var),
    LeakyRelu(Var, T),
    Relu(Var),
    Gelu(Var),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    IndexSelect {
        input: Var,
        indices: Vec<usize>,
    },
    EdgeScores {
        q: Var,
        k: Var,
        rel: Option<Var>,
        edges: Arc<EdgeList>,
    },
    SegmentSoftmax {
        scores: Var,
        edges: Arc<EdgeList>,
    },
    EdgeAggregate {
        alpha: Var,
        values: Var,
        edges: Arc<EdgeList>,
    },
    MaskedNll {
        logp: Var,
        targets: Vec<Option<usize>>,
        count: usize,
    },
    Custom {
        spec: Box<dyn CustomGrad<T>>,
        inputs: Vec<Var>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::ConcatLast(..) => "concat",
            Op::SliceLast(..) => "slice",
            Op::Sum(..) => "sum",
            Op::Exp(..) => "exp",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::MaskedSoftmax(..) => "softmax_masked",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::IndexSelect { .. } => "index_select",
            Op::EdgeScores { .. } => "edge_scores",
            Op::SegmentSoftmax { .. } => "segment_softmax",
            Op::EdgeAggregate { .. } => "edge_aggregate",
            Op::MaskedNll { .. } => "masked_nll",
            Op::Custom { spec, .. } => spec.name(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("params", &self.param_order.len())
            .finish()
    }
}

const GELU_INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * GELU_INV_SQRT2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * GELU_INV_SQRT2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// c[m×n] += a[m×k] · b[k×n]
fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m×k] += g[m×n] · b[k×n]ᵀ
fn gemm_nt<T: Scalar>(g: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            c[i * k + p] += acc;
        }
    }
}

/// c[k×n] += a[m×k]ᵀ · g[m×n]
fn gemm_tn<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

struct MatMulDims {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch = broadcast_shapes(ab, bb).ok_or_else(|| Error::shape("matmul", a, b))?;
    let a_batch = broadcast_offsets(&batch, ab);
    let b_batch = broadcast_offsets(&batch, bb);
    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatMulDims {
        m,
        k,
        n,
        out_shape,
        a_batch,
        b_batch,
    })
}

fn softmax_row<T: Scalar>(x: &[T], mask: Option<&[bool]>, out: &mut [T]) {
    let valid = |i: usize| mask.is_none_or(|m| m[i]);
    let mut max = T::neg_infinity();
    for (i, &v) in x.iter().enumerate() {
        if valid(i) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (i, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        if valid(i) {
            *o = (v - max).exp();
            sum += *o;
        } else {
            *o = T::zero();
        }
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn var(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar_constant(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Register (once) the named parameter from `store` as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.var(store.get(name)?.clone());
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        Ok(v)
    }

    pub fn param_vars(&self) -> &[(String, Var)] {
        &self.param_order
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── elementwise ────────────────────────────────────────────────

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor::from_vec(av.shape(), data));
        }
        let shape = broadcast_shapes(av.shape(), bv.shape())
            .ok_or_else(|| Error::shape(op, av.shape(), bv.shape()))?;
        let oa = broadcast_offsets(&shape, av.shape());
        let ob = broadcast_offsets(&shape, bv.shape());
        let (ad, bd) = (av.data(), bv.data());
        let data = oa.iter().zip(&ob).map(|(&i, &j)| f(ad[i], bd[j])).collect();
        Ok(Tensor::from_vec(&shape, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::Shift(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::of(gelu_fwd(x.f64())));
        self.push(out, Op::Gelu(a), &[a])
    }

    // ── shape ops ──────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(perm)?;
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(a, &perm)
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Internal("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(Tensor::from_vec(&shape, data), Op::ConcatLast(parts.to_vec()), parts))
    }

    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let w = *s.last().ok_or_else(|| Error::shape("slice", &s, &[start, len]))?;
        if start + len > w {
            return Err(Error::shape("slice", &s, &[start, len]));
        }
        let rows = numel(&s[..s.len() - 1]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * w + start..r * w + start + len]);
        }
        let mut shape = s[..s.len() - 1].to_vec();
        shape.push(len);
        Ok(self.push(Tensor::from_vec(&shape, data), Op::SliceLast(a, start), &[a]))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    // ── linear algebra ─────────────────────────────────────────────

    /// Batched matrix product `[.., m, k] × [.., k, n]` with broadcast batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let dims = matmul_dims(self.shape(a), self.shape(b))?;
        let (m, k, n) = (dims.m, dims.k, dims.n);
        let mut out = vec![T::zero(); numel(&dims.out_shape)];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for (bi, (&oa, &ob)) in dims.a_batch.iter().zip(&dims.b_batch).enumerate() {
            gemm_nn(
                &ad[oa * m * k..(oa + 1) * m * k],
                &bd[ob * k * n..(ob + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::from_vec(&dims.out_shape, out);
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    // ── normalizations ─────────────────────────────────────────────

    /// Softmax over the last axis restricted to entries where `mask` is true.
    /// Masked entries are exactly zero; rows without valid entries are all zero.
    pub fn softmax_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.numel() {
            return Err(Error::shape("softmax_masked", x.shape(), &[mask.len()]));
        }
        let c = *x.shape().last().unwrap_or(&1);
        let mut out = vec![T::zero(); x.numel()];
        for ((row, m), o) in x.data().chunks(c).zip(mask.chunks(c)).zip(out.chunks_mut(c)) {
            softmax_row(row, Some(m), o);
        }
        let value = Tensor::from_vec(x.shape(), out);
        Ok(self.push(value, Op::MaskedSoftmax(a), &[a]))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let mask = vec![true; self.value(a).numel()];
        self.softmax_masked(a, &mask).expect("mask sized to input")
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = *x.shape().last().unwrap_or(&1);
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let value = Tensor::from_vec(x.shape(), out);
        self.push(value, Op::LogSoftmax(a), &[a])
    }

    /// Layer normalization over the last axis: `gain * (x - mean) / sqrt(var + eps) + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xs = self.value(x);
        let d = *xs.shape().last().unwrap_or(&1);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", xs.shape(), self.shape(gain)));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let dn = T::of(d as f64);
        let rows = xs.numel() / d.max(1);
        let mut xhat = Vec::with_capacity(xs.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.numel());
        for row in xs.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[i] + b[i]);
            }
        }
        let value = Tensor::from_vec(xs.shape(), out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    // ── indexing ───────────────────────────────────────────────────

    /// Rows of a `[n, d]` table selected by `ids`; output shape is `prefix ++ [d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 || numel(prefix) != ids.len() {
            return Err(Error::shape("gather", t.shape(), prefix));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::Data(format!("gather index {id} out of range for table of {n} rows")));
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let value = Tensor::from_vec(&shape, data);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Select entries along axis 0.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let s = x.shape().to_vec();
        if s.is_empty() {
            return Err(Error::shape("index_select", &s, indices));
        }
        let stride = numel(&s[1..]);
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= s[0] {
                return Err(Error::shape("index_select", &s, &[i]));
            }
            data.extend_from_slice(&x.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        let value = Tensor::from_vec(&shape, data);
        Ok(self.push(
            value,
            Op::IndexSelect {
                input: a,
                indices: indices.to_vec(),
            },
            &[a],
        ))
    }

    // ── sparse graph attention primitives ──────────────────────────

    /// Per-edge additive scores `q[i] + k[j] + rel[type(i,j)]`.
    /// `q` and `k` hold one scalar per node (`batch * nodes` elements).
    pub fn edge_scores(&mut self, q: Var, k: Var, rel: Option<Var>, edges: &Arc<EdgeList>) -> Result<Var> {
        let rows = edges.num_rows();
        if self.value(q).numel() != rows || self.value(k).numel() != rows {
            return Err(Error::shape("edge_scores", self.shape(q), &[edges.batch, edges.nodes]));
        }
        if let Some(r) = rel {
            let max_rel = edges.rel.iter().copied().max().unwrap_or(0) as usize;
            if self.value(r).numel() <= max_rel {
                return Err(Error::shape("edge_scores", self.shape(r), &[max_rel + 1]));
            }
        }
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let rd = rel.map(|r| self.value(r).data());
        let mut out = Vec::with_capacity(edges.num_edges());
        for row in 0..rows {
            for e in edges.row_range(row) {
                let mut s = qd[row] + kd[edges.key_index(row, e)];
                if let Some(rd) = rd {
                    s += rd[edges.rel[e] as usize];
                }
                out.push(s);
            }
        }
        let value = Tensor::from_vec(&[edges.num_edges()], out);
        let mut inputs = vec![q, k];
        inputs.extend(rel);
        Ok(self.push(
            value,
            Op::EdgeScores {
                q,
                k,
                rel,
                edges: Arc::clone(edges),
            },
            &inputs,
        ))
    }

    /// Softmax over each row's outgoing edges.
    pub fn segment_softmax(&mut self, scores: Var, edges: &Arc<EdgeList>) -> Result<Var> {
        let s = self.value(scores);
        if s.numel() != edges.num_edges() {
            return Err(Error::shape("segment_softmax", s.shape(), &[edges.num_edges()]));
        }
        let mut out = vec![T::zero(); s.numel()];
        for row in 0..edges.num_rows() {
            let r = edges.row_range(row);
            softmax_row(&s.data()[r.clone()], None, &mut out[r]);
        }
        let value = Tensor::from_vec(&[edges.num_edges()], out);
        Ok(self.push(
            value,
            Op::SegmentSoftmax {
                scores,
                edges: Arc::clone(edges),
            },
            &[scores],
        ))
    }

    /// `out[i] = Σ_j alpha(i,j) · values[j]` over the edges of row `i`.
    pub fn edge_aggregate(&mut self, alpha: Var, values: Var, edges: &Arc<EdgeList>) -> Result<Var> {
        let v = self.value(values);
        let vs = v.shape().to_vec();
        if vs.len() != 3 || vs[0] != edges.batch || vs[1] != edges.nodes {
            return Err(Error::shape("edge_aggregate", &vs, &[edges.batch, edges.nodes]));
        }
        if self.value(alpha).numel() != edges.num_edges() {
            return Err(Error::shape("edge_aggregate", self.shape(alpha), &[edges.num_edges()]));
        }
        let d = vs[2];
        let (ad, vd) = (self.value(alpha).data(), v.data());
        let mut out = vec![T::zero(); numel(&vs)];
        for row in 0..edges.num_rows() {
            let orow = &mut out[row * d..(row + 1) * d];
            for e in edges.row_range(row) {
                let key = edges.key_index(row, e);
                let w = ad[e];
                for (o, &x) in orow.iter_mut().zip(&vd[key * d..(key + 1) * d]) {
                    *o += w * x;
                }
            }
        }
        let value = Tensor::from_vec(&vs, out);
        Ok(self.push(
            value,
            Op::EdgeAggregate {
                alpha,
                values,
                edges: Arc::clone(edges),
            },
            &[alpha, values],
        ))
    }

    // ── losses ─────────────────────────────────────────────────────

    /// Mean negative log-likelihood over rows of `logp` (last axis = classes)
    /// whose target is `Some`. Rows with `None` contribute exactly zero.
    pub fn masked_nll(&mut self, logp: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lp = self.value(logp);
        let c = *lp.shape().last().unwrap_or(&1);
        if lp.numel() != targets.len() * c {
            return Err(Error::shape("masked_nll", lp.shape(), &[targets.len(), c]));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Data("cross-entropy over zero valid positions".into()));
        }
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= c {
                    return Err(Error::Data(format!("label {t} out of range for {c} classes")));
                }
                total -= lp.data()[r * c + t];
            }
        }
        let value = Tensor::scalar(total / T::of(count as f64));
        Ok(self.push(
            value,
            Op::MaskedNll {
                logp,
                targets: targets.to_vec(),
                count,
            },
            &[logp],
        ))
    }

    // ── custom gradients ───────────────────────────────────────────

    pub fn custom(&mut self, spec: Box<dyn CustomGrad<T>>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = spec.forward(&values)?;
        Ok(self.push(
            out,
            Op::Custom {
                spec,
                inputs: inputs.to_vec(),
            },
            inputs,
        ))
    }

    // ── backward ───────────────────────────────────────────────────

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (before, after) = grads.split_at_mut(i);
            let Some(g) = after[0].as_ref() else { continue };
            self.node_backward(node, g, before)?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.sum_to_shape(val(*a).shape()));
                }
                if self.wants(*b) {
                    let mut gb = g.sum_to_shape(val(*b).shape());
                    if matches!(node.op, Op::Sub(..)) {
                        gb = gb.map(|x| -x);
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let shape = g.shape();
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !self.wants(this) {
                        continue;
                    }
                    let o = val(other);
                    let prod = if o.shape() == shape {
                        g.data().iter().zip(o.data()).map(|(&x, &y)| x * y).collect()
                    } else {
                        let off = broadcast_offsets(shape, o.shape());
                        g.data().iter().zip(&off).map(|(&x, &j)| x * o.data()[j]).collect()
                    };
                    let full = Tensor::from_vec(shape, prod);
                    accumulate(grads, this, full.sum_to_shape(val(this).shape()));
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.map(|x| x * *c));
                }
            }
            Op::Shift(a) | Op::Reshape(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, Tensor::from_vec(val(*a).shape(), g.data().to_vec()));
                }
            }
            Op::Permute(a, perm) => {
                if self.wants(*a) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    accumulate(grads, *a, g.permute(&inv)?);
                }
            }
            Op::ConcatLast(parts) => {
                let total = *g.shape().last().unwrap();
                let rows = g.numel() / total.max(1);
                let mut start = 0;
                for &p in parts {
                    let w = *val(p).shape().last().unwrap();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                        }
                        accumulate(grads, p, Tensor::from_vec(val(p).shape(), d));
                    }
                    start += w;
                }
            }
            Op::SliceLast(a, start) => {
                if self.wants(*a) {
                    let s = val(*a).shape();
                    let w = *s.last().unwrap();
                    let len = *g.shape().last().unwrap();
                    let mut d = vec![T::zero(); val(*a).numel()];
                    for (r, chunk) in g.data().chunks(len.max(1)).enumerate() {
                        d[r * w + start..r * w + start + len].copy_from_slice(chunk);
                    }
                    accumulate(grads, *a, Tensor::from_vec(s, d));
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item()));
                }
            }
            Op::Exp(a) => {
                if self.wants(*a) {
                    let d = g.data().iter().zip(node.value.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *a, Tensor::from_vec(g.shape(), d));
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.wants(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&x, &v)| if v > T::zero() { x } else { x * *slope })
                        .collect();
                    accumulate(grads, *a, Tensor::from_vec(g.shape(), d));
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&x, &v)| if v > T::zero() { x } else { T::zero() })
                        .collect();
                    accumulate(grads, *a, Tensor::from_vec(g.shape(), d));
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&x, &v)| x * T::of(gelu_grad(v.f64())))
                        .collect();
                    accumulate(grads, *a, Tensor::from_vec(g.shape(), d));
                }
            }
            Op::MaskedSoftmax(a) => {
                if self.wants(*a) {
                    let y = &node.value;
                    let c = *y.shape().last().unwrap_or(&1);
                    let mut d = Vec::with_capacity(y.numel());
                    for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        d.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                    }
                    accumulate(grads, *a, Tensor::from_vec(y.shape(), d));
                }
            }
            Op::LogSoftmax(a) => {
                if self.wants(*a) {
                    let y = &node.value;
                    let c = *y.shape().last().unwrap_or(&1);
                    let mut d = Vec::with_capacity(y.numel());
                    for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                        let gs: T = gr.iter().copied().sum();
                        d.extend(yr.iter().zip(gr).map(|(&l, &q)| q - l.exp() * gs));
                    }
                    accumulate(grads, *a, Tensor::from_vec(y.shape(), d));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let dsz = val(*gain).numel();
                let gd = val(*gain).data();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut gg = vec![T::zero(); dsz];
                    let mut gb = vec![T::zero(); dsz];
                    for (gr, hr) in g.data().chunks(dsz).zip(xhat.chunks(dsz)) {
                        for i in 0..dsz {
                            gg[i] += gr[i] * hr[i];
                            gb[i] += gr[i];
                        }
                    }
                    if self.wants(*gain) {
                        accumulate(grads, *gain, Tensor::from_vec(&[dsz], gg));
                    }
                    if self.wants(*bias) {
                        accumulate(grads, *bias, Tensor::from_vec(&[dsz], gb));
                    }
                }
                if self.wants(*x) {
                    let n = T::of(dsz as f64);
                    let mut d = Vec::with_capacity(g.numel());
                    for ((gr, hr), &is) in g.data().chunks(dsz).zip(xhat.chunks(dsz)).zip(inv_std) {
                        let gh: Vec<T> = gr.iter().zip(gd).map(|(&a, &b)| a * b).collect();
                        let s1: T = gh.iter().copied().sum();
                        let s2: T = gh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        d.extend(gh.iter().zip(hr).map(|(&a, &h)| is / n * (n * a - s1 - h * s2)));
                    }
                    accumulate(grads, *x, Tensor::from_vec(g.shape(), d));
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let t = val(*table);
                    let d = t.shape()[1];
                    let mut out = vec![T::zero(); t.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            out[id * d + c] += g.data()[r * d + c];
                        }
                    }
                    accumulate(grads, *table, Tensor::from_vec(t.shape(), out));
                }
            }
            Op::IndexSelect { input, indices } => {
                if self.wants(*input) {
                    let x = val(*input);
                    let stride = numel(&x.shape()[1..]);
                    let mut out = vec![T::zero(); x.numel()];
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..stride {
                            out[i * stride + c] += g.data()[r * stride + c];
                        }
                    }
                    accumulate(grads, *input, Tensor::from_vec(x.shape(), out));
                }
            }
            Op::EdgeScores { q, k, rel, edges } => {
                let rows = edges.num_rows();
                let mut gq = vec![T::zero(); rows];
                let mut gk = vec![T::zero(); rows];
                let mut gr = rel.map(|r| vec![T::zero(); val(r).numel()]);
                for row in 0..rows {
                    for e in edges.row_range(row) {
                        let ge = g.data()[e];
                        gq[row] += ge;
                        gk[edges.key_index(row, e)] += ge;
                        if let Some(gr) = gr.as_mut() {
                            gr[edges.rel[e] as usize] += ge;
                        }
                    }
                }
                if self.wants(*q) {
                    accumulate(grads, *q, Tensor::from_vec(val(*q).shape(), gq));
                }
                if self.wants(*k) {
                    accumulate(grads, *k, Tensor::from_vec(val(*k).shape(), gk));
                }
                if let (Some(r), Some(gr)) = (rel, gr) {
                    if self.wants(*r) {
                        accumulate(grads, *r, Tensor::from_vec(val(*r).shape(), gr));
                    }
                }
            }
            Op::SegmentSoftmax { scores, edges } => {
                if self.wants(*scores) {
                    let y = node.value.data();
                    let mut d = vec![T::zero(); y.len()];
                    for row in 0..edges.num_rows() {
                        let r = edges.row_range(row);
                        let dot: T = r.clone().map(|e| y[e] * g.data()[e]).sum();
                        for e in r {
                            d[e] = y[e] * (g.data()[e] - dot);
                        }
                    }
                    accumulate(grads, *scores, Tensor::from_vec(&[y.len()], d));
                }
            }
            Op::EdgeAggregate { alpha, values, edges } => {
                let v = val(*values);
                let d = v.shape()[2];
                let ad = val(*alpha).data();
                let want_a = self.wants(*alpha);
                let want_v = self.wants(*values);
                let mut ga = vec![T::zero(); ad.len()];
                let mut gv = vec![T::zero(); v.numel()];
                for row in 0..edges.num_rows() {
                    let grow = &g.data()[row * d..(row + 1) * d];
                    for e in edges.row_range(row) {
                        let key = edges.key_index(row, e);
                        if want_a {
                            ga[e] = grow.iter().zip(&v.data()[key * d..(key + 1) * d]).map(|(&x, &y)| x * y).sum();
                        }
                        if want_v {
                            let w = ad[e];
                            for (o, &x) in gv[key * d..(key + 1) * d].iter_mut().zip(grow) {
                                *o += w * x;
                            }
                        }
                    }
                }
                if want_a {
                    accumulate(grads, *alpha, Tensor::from_vec(val(*alpha).shape(), ga));
                }
                if want_v {
                    accumulate(grads, *values, Tensor::from_vec(v.shape(), gv));
                }
            }
            Op::MaskedNll { logp, targets, count } => {
                if self.wants(*logp) {
                    let lp = val(*logp);
                    let c = *lp.shape().last().unwrap_or(&1);
                    let scale = g.item() / T::of(*count as f64);
                    let mut d = vec![T::zero(); lp.numel()];
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            d[r * c + t] = -scale;
                        }
                    }
                    accumulate(grads, *logp, Tensor::from_vec(lp.shape(), d));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let dims = matmul_dims(av.shape(), bv.shape())?;
                let (m, k, n) = (dims.m, dims.k, dims.n);
                let want_a = self.wants(*a);
                let want_b = self.wants(*b);
                let mut ga = if want_a { vec![T::zero(); av.numel()] } else { Vec::new() };
                let mut gb = if want_b { vec![T::zero(); bv.numel()] } else { Vec::new() };
                for (bi, (&oa, &ob)) in dims.a_batch.iter().zip(&dims.b_batch).enumerate() {
                    let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                    if want_a {
                        gemm_nt(gs, &bv.data()[ob * k * n..(ob + 1) * k * n], &mut ga[oa * m * k..(oa + 1) * m * k], m, k, n);
                    }
                    if want_b {
                        gemm_tn(&av.data()[oa * m * k..(oa + 1) * m * k], gs, &mut gb[ob * k * n..(ob + 1) * k * n], m, k, n);
                    }
                }
                if want_a {
                    accumulate(grads, *a, Tensor::from_vec(av.shape(), ga));
                }
                if want_b {
                    accumulate(grads, *b, Tensor::from_vec(bv.shape(), gb));
                }
            }
            Op::Custom { spec, inputs } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let out = spec.backward(g, &values, &node.value);
                if out.len() != inputs.len() {
                    return Err(Error::Internal(format!(
                        "custom op `{}` returned {} gradients for {} inputs",
                        spec.name(),
                        out.len(),
                        inputs.len()
                    )));
                }
                for (&v, gi) in inputs.iter().zip(out) {
                    let Some(gi) = gi else { continue };
                    if gi.shape() != val(v).shape() {
                        return Err(Error::Internal(format!(
                            "custom op `{}` returned gradient of shape {:?} for input of shape {:?}",
                            spec.name(),
                            gi.shape(),
                            val(v).shape()
                        )));
                    }
                    if self.wants(v) {
                        accumulate(grads, v, gi);
                    }
                }
            }
        }
        Ok(())
    }

    /// Name of the op that produced `v`; used in diagnostics.
    pub fn op_name(&self, v: Var) -> &str {
        self.nodes[v.0].op.name()
    }
}

/// Result of a backward sweep.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss wrt `v`; `None` when no path (or only blocked paths) reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient wrt `v`, zero-filled when unreached.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }

    /// Gradients of every parameter registered on `tape`.
    pub fn param_grads(&self, tape: &Tape<T>) -> ParamGrads<T> {
        tape.param_vars()
            .iter()
            .map(|(name, v)| (name.clone(), self.get_or_zeros(tape, *v)))
            .collect()
    }
}
