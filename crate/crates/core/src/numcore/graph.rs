//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its output value.
//! Nodes are appended in evaluation order, which is already a topological
//! order, so [`Graph::backward`] walks them in reverse and visits each node
//! once, after all of its consumers.
//!
//! Shape rules (all tensors row-major; "rows" means the tensor viewed as
//! `[len / last_dim, last_dim]`):
//!
//! | op | inputs | output |
//! |---|---|---|
//! | `matmul` | `[m,k]`, `[k,n]` | `[m,n]` |
//! | `add`, `sub`, `mul` | equal shapes | same |
//! | `add_bias` | `[.., n]`, `[n]` | same as first |
//! | `masked_softmax` | `[b*h,q,k]`, key mask `[b*k]` | same |
//! | `softmax`, `layer_norm` | `[.., d]` (+ `[d]`, `[d]`) | same, over the last axis |
//! | `gather_rows` | `[v,d]`, ids | `[ids,d]` |
//! | `concat_cols` | `[m,n_i]`... | `[m, Σn_i]` |
//! | `slice_cols`, `slice_rows` | `[m,n]` | sub-block |
//! | `bmm` / `bmm_nt` | `[b,m,k]` · `[b,k,n]` / `[b,n,k]` | `[b,m,n]` |
//! | `sum`, `mean`, losses | any | scalar `[]` |

use super::kernels::{gemm, gemm_nt, gemm_tn, transpose};
use super::tensor::{ParamId, ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, S),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Gelu(usize),
    Softmax(usize),
    MaskedSoftmax { x: usize, scale: S },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<S>, rstd: Vec<S> },
    GatherRows { table: usize, ids: Vec<usize> },
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    SelectRows { mask: Vec<bool>, a: usize, b: usize },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Bmm(usize, usize),
    BmmNt(usize, usize),
    SplitHeads { x: usize, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: usize, batch: usize, seq: usize, heads: usize },
    BceLogits { logits: usize, targets: Vec<S>, weights: Vec<S> },
    MaskedCe { logits: usize, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<S>, count: usize },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<S = f32> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<S: Scalar>(x: S) -> S {
    let (c, a) = (S::of(GELU_C), S::of(GELU_A));
    S::of(0.5) * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let (c, a) = (S::of(GELU_C), S::of(GELU_A));
    let t = (c * (x + a * x * x * x)).tanh();
    S::of(0.5) * (S::one() + t) + S::of(0.5) * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * a * x * x)
}

/// Stable `log(1 + exp(-|z|)) + max(z, 0) - z*y`.
fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, parents: &[usize]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        self.val(v)
    }

    /// Gradient of the loss with respect to `v`, after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter leaf; its gradient flows back through
    /// [`Graph::accumulate_into`].
    pub fn param(&mut self, params: &ParamSet<S>, id: ParamId) -> Var {
        let p = params.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        gemm(self.val(a).data(), self.val(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    /// Adds a row vector to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(bias));
        if tb.shape().len() != 1 || tb.len() != ta.last_dim() {
            return Err(shape_err("add_bias", ta.shape(), tb.shape()));
        }
        let n = tb.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[i % n])
            .collect();
        let t = Tensor::new(ta.shape(), data)?;
        Ok(self.push(t, Op::AddBias(a.0, bias.0), &[a.0, bias.0]))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let ta = self.val(a);
        let t = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x * c).collect()).expect("same shape");
        self.push(t, Op::Scale(a.0, c), &[a.0])
    }

    fn map(&mut self, a: Var, f: impl Fn(S) -> S) -> Tensor<S> {
        let ta = self.val(a);
        Tensor::new(ta.shape(), ta.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a.0), &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.tanh());
        self.push(t, Op::Tanh(a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(S::zero()));
        self.push(t, Op::Relu(a.0), &[a.0])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map(a, gelu);
        self.push(t, Op::Gelu(a.0), &[a.0])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let d = ta.last_dim();
        let mut out = vec![S::zero(); ta.len()];
        for (row, dst) in ta.data().chunks(d).zip(out.chunks_mut(d)) {
            let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
            let mut total = 0f64;
            for (o, &x) in dst.iter_mut().zip(row) {
                *o = (x - max).exp();
                total += o.f64();
            }
            let inv = S::of(1.0 / total);
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let t = Tensor::new(ta.shape(), out).expect("same shape");
        self.push(t, Op::Softmax(a.0), &[a.0])
    }

    /// Attention weights: softmax over the last axis of `scale · x`, where
    /// `x` is `[batch*heads, q, k]` and keys with `key_valid[b*k + j] ==
    /// false` get weight exactly 0. Rows without a valid key are all zero.
    pub fn masked_softmax(&mut self, x: Var, scale: S, key_valid: &[bool], heads: usize) -> Result<Var> {
        let tx = self.val(x);
        let s = tx.shape();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 || key_valid.len() != (s[0] / heads) * s[2] {
            return Err(shape_err("masked_softmax", s, &[key_valid.len(), heads]));
        }
        let (q, k) = (s[1], s[2]);
        let mut out = vec![S::zero(); tx.len()];
        for (r, (row, dst)) in tx.data().chunks(k).zip(out.chunks_mut(k)).enumerate() {
            let b = r / q / heads;
            let valid = &key_valid[b * k..(b + 1) * k];
            let max = row
                .iter()
                .zip(valid)
                .filter(|(_, &v)| v)
                .fold(S::neg_infinity(), |m, (&x, _)| m.max(x * scale));
            if max == S::neg_infinity() {
                continue;
            }
            let mut total = 0f64;
            for ((o, &x), &v) in dst.iter_mut().zip(row).zip(valid) {
                if v {
                    *o = (x * scale - max).exp();
                    total += o.f64();
                }
            }
            let inv = S::of(1.0 / total);
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let t = Tensor::new(s, out)?;
        Ok(self.push(t, Op::MaskedSoftmax { x: x.0, scale }, &[x.0]))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.val(x), self.val(gamma), self.val(beta));
        let d = tx.last_dim();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(shape_err("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let mut xhat = vec![S::zero(); tx.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = S::of(inv);
            for j in 0..d {
                let h = S::of((row[j].f64() - mean) * inv);
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    /// Row lookup, e.g. an embedding table indexed by token ids.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.val(table);
        if tt.shape().len() != 2 {
            return Err(shape_err("gather_rows", tt.shape(), &[ids.len()]));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Graph(format!("gather_rows: id {bad} out of range for {v} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.val(parts[0]).shape().to_vec();
        if first.len() != 2 {
            return Err(shape_err("concat_cols", &first, &[]));
        }
        let m = first[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.val(p).shape();
            if s.len() != 2 || s[0] != m {
                return Err(shape_err("concat_cols", &first, s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.val(p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(&[m, total], out)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(t, Op::ConcatCols(ids.clone()), &ids))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.val(x);
        let s = tx.shape();
        if s.len() != 2 || start + len > s[1] {
            return Err(shape_err("slice_cols", s, &[start, len]));
        }
        let (m, n) = (s[0], s[1]);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&tx.data()[r * n + start..r * n + start + len]);
        }
        let t = Tensor::new(&[m, len], out)?;
        Ok(self.push(t, Op::SliceCols { x: x.0, start }, &[x.0]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.val(x);
        let s = tx.shape();
        if s.len() != 2 || start + len > s[0] {
            return Err(shape_err("slice_rows", s, &[start, len]));
        }
        let n = s[1];
        let t = Tensor::new(&[len, n], tx.data()[start * n..(start + len) * n].to_vec())?;
        Ok(self.push(t, Op::SliceRows { x: x.0, start }, &[x.0]))
    }

    /// Row `i` of the output is row `i` of `a` where `mask[i]`, else of `b`.
    pub fn select_rows(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() || ta.rows() != mask.len() {
            return Err(shape_err("select_rows", ta.shape(), tb.shape()));
        }
        let d = ta.last_dim();
        let mut out = Vec::with_capacity(ta.len());
        for (r, &m) in mask.iter().enumerate() {
            let src = if m { ta } else { tb };
            out.extend_from_slice(&src.data()[r * d..(r + 1) * d]);
        }
        let t = Tensor::new(ta.shape(), out)?;
        Ok(self.push(
            t,
            Op::SelectRows {
                mask: mask.to_vec(),
                a: a.0,
                b: b.0,
            },
            &[a.0, b.0],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.val(a).data().iter().map(|x| x.f64()).sum();
        self.push(Tensor::scalar(S::of(total)), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let total: f64 = ta.data().iter().map(|x| x.f64()).sum();
        let n = ta.len().max(1) as f64;
        self.push(Tensor::scalar(S::of(total / n)), Op::Mean(a.0), &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a.0), &[a.0]))
    }

    fn batch_dims(&self, a: Var, b: Var, name: &'static str, transposed: bool) -> Result<(usize, usize, usize, usize)> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transposed { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(shape_err(name, sa, sb));
        }
        let n = if transposed { sb[1] } else { sb[2] };
        Ok((sa[0], sa[1], sa[2], n))
    }

    /// Batched `[b,m,k] · [b,k,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, m, k, n) = self.batch_dims(a, b, "bmm", false)?;
        let mut out = vec![S::zero(); batch * m * n];
        let (da, db) = (self.val(a).data(), self.val(b).data());
        for i in 0..batch {
            gemm(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor::new(&[batch, m, n], out)?;
        Ok(self.push(t, Op::Bmm(a.0, b.0), &[a.0, b.0]))
    }

    /// Batched `[b,m,k] · [b,n,k]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, m, k, n) = self.batch_dims(a, b, "bmm_nt", true)?;
        let mut out = vec![S::zero(); batch * m * n];
        let (da, db) = (self.val(a).data(), self.val(b).data());
        for i in 0..batch {
            gemm_nt(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * n * k..(i + 1) * n * k],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor::new(&[batch, m, n], out)?;
        Ok(self.push(t, Op::BmmNt(a.0, b.0), &[a.0, b.0]))
    }

    /// `[batch*seq, heads*dh]` → `[batch*heads, seq, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let tx = self.val(x);
        let s = tx.shape();
        if s.len() != 2 || s[0] != batch * seq || s[1] % heads != 0 {
            return Err(shape_err("split_heads", s, &[batch, seq, heads]));
        }
        let dh = s[1] / heads;
        let out = permute_heads(tx.data(), batch, seq, heads, dh, false);
        let t = Tensor::new(&[batch * heads, seq, dh], out)?;
        Ok(self.push(t, Op::SplitHeads { x: x.0, batch, seq, heads }, &[x.0]))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let tx = self.val(x);
        let s = tx.shape();
        if s.len() != 3 || s[0] != batch * heads || s[1] != seq {
            return Err(shape_err("merge_heads", s, &[batch, seq, heads]));
        }
        let dh = s[2];
        let out = permute_heads(tx.data(), batch, seq, heads, dh, true);
        let t = Tensor::new(&[batch * seq, heads * dh], out)?;
        Ok(self.push(t, Op::MergeHeads { x: x.0, batch, seq, heads }, &[x.0]))
    }

    /// Mean binary cross-entropy computed from raw scores, optionally with
    /// per-example weights.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[S], weights: Option<&[S]>) -> Result<Var> {
        let tl = self.val(logits);
        if tl.len() != targets.len() || weights.is_some_and(|w| w.len() != targets.len()) {
            return Err(shape_err("bce_with_logits", tl.shape(), &[targets.len()]));
        }
        let weights = weights.map_or_else(|| vec![S::one(); targets.len()], <[S]>::to_vec);
        let total: f64 = tl
            .data()
            .iter()
            .zip(targets)
            .zip(&weights)
            .map(|((z, y), w)| w.f64() * bce_term(z.f64(), y.f64()))
            .sum();
        let loss = total / targets.len().max(1) as f64;
        Ok(self.push(
            Tensor::scalar(S::of(loss)),
            Op::BceLogits {
                logits: logits.0,
                targets: targets.to_vec(),
                weights,
            },
            &[logits.0],
        ))
    }

    /// Mean softmax cross-entropy over the rows where `mask` is set.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.val(logits);
        let s = tl.shape();
        if s.len() != 2 || s[0] != targets.len() || s[0] != mask.len() {
            return Err(shape_err("masked_cross_entropy", s, &[targets.len()]));
        }
        let c = s[1];
        if let Some(&bad) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&t| t >= c) {
            return Err(Error::Graph(format!("masked_cross_entropy: target {bad} out of range for {c} classes")));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Graph("masked_cross_entropy: mask selects no rows".into()));
        }
        let mut probs = vec![S::zero(); tl.len()];
        let mut total = 0f64;
        for r in 0..s[0] {
            if !mask[r] {
                continue;
            }
            let row = &tl.data()[r * c..(r + 1) * c];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
            let z: f64 = row.iter().map(|x| (x.f64() - max).exp()).sum();
            let log_z = max + z.ln();
            total += log_z - row[targets[r]].f64();
            for j in 0..c {
                probs[r * c + j] = S::of((row[j].f64() - log_z).exp());
            }
        }
        Ok(self.push(
            Tensor::scalar(S::of(total / count as f64)),
            Op::MaskedCe {
                logits: logits.0,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            &[logits.0],
        ))
    }

    /// Populates gradients of the scalar `loss` for every node that
    /// depends on a gradient-requiring leaf. Runs at most once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward already ran on this graph".into()));
        }
        if self.val(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, target: usize, contribution: impl FnOnce(&mut [S])) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let len = self.nodes[target].value.len();
        let slot = self.grads[target].get_or_insert_with(|| vec![S::zero(); len]);
        contribution(slot);
    }

    fn propagate(&mut self, i: usize, g: &[S]) {
        // Temporarily move the op out so parent values can be borrowed.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let sa = self.nodes[a].value.shape().to_vec();
                let sb = self.nodes[b].value.shape().to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a].requires_grad {
                    let bv = self.nodes[b].value.data().to_vec();
                    self.acc(a, |ga| gemm_nt(g, &bv, ga, m, n, k));
                }
                if self.nodes[b].requires_grad {
                    let av = self.nodes[a].value.data().to_vec();
                    self.acc(b, |gb| gemm_tn(&av, g, gb, m, k, n));
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    self.acc(p, |gp| gp.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                }
            }
            Op::Sub(a, b) => {
                self.acc(*a, |gp| gp.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                self.acc(*b, |gp| gp.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a].requires_grad {
                    let bv = self.nodes[b].value.data().to_vec();
                    self.acc(a, |gp| {
                        for ((x, &y), &o) in gp.iter_mut().zip(g).zip(&bv) {
                            *x += y * o;
                        }
                    });
                }
                if self.nodes[b].requires_grad {
                    let av = self.nodes[a].value.data().to_vec();
                    self.acc(b, |gp| {
                        for ((x, &y), &o) in gp.iter_mut().zip(g).zip(&av) {
                            *x += y * o;
                        }
                    });
                }
            }
            Op::AddBias(a, bias) => {
                self.acc(*a, |gp| gp.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                let n = self.nodes[*bias].value.len();
                self.acc(*bias, |gb| {
                    let mut sums = vec![0f64; n];
                    for (j, &y) in g.iter().enumerate() {
                        sums[j % n] += y.f64();
                    }
                    for (x, s) in gb.iter_mut().zip(sums) {
                        *x += S::of(s);
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(*a, |gp| gp.iter_mut().zip(g).for_each(|(x, &y)| *x += y * c));
            }
            Op::Sigmoid(a) => {
                let out = self.nodes[i].value.data().to_vec();
                self.acc(*a, |gp| {
                    for ((x, &y), &s) in gp.iter_mut().zip(g).zip(&out) {
                        *x += y * s * (S::one() - s);
                    }
                });
            }
            Op::Tanh(a) => {
                let out = self.nodes[i].value.data().to_vec();
                self.acc(*a, |gp| {
                    for ((x, &y), &t) in gp.iter_mut().zip(g).zip(&out) {
                        *x += y * (S::one() - t * t);
                    }
                });
            }
            Op::Relu(a) => {
                let inp = self.nodes[*a].value.data().to_vec();
                self.acc(*a, |gp| {
                    for ((x, &y), &v) in gp.iter_mut().zip(g).zip(&inp) {
                        if v > S::zero() {
                            *x += y;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let inp = self.nodes[*a].value.data().to_vec();
                self.acc(*a, |gp| {
                    for ((x, &y), &v) in gp.iter_mut().zip(g).zip(&inp) {
                        *x += y * gelu_grad(v);
                    }
                });
            }
            Op::Softmax(a) => {
                let out = self.nodes[i].value.data().to_vec();
                let d = self.nodes[i].value.last_dim();
                self.acc(*a, |gp| {
                    for ((gx, gy), y) in gp.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                        let dot: f64 = gy.iter().zip(y).map(|(a, b)| a.f64() * b.f64()).sum();
                        let dot = S::of(dot);
                        for j in 0..d {
                            gx[j] += y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x, scale } => {
                let out = self.nodes[i].value.data().to_vec();
                let d = self.nodes[i].value.last_dim();
                let scale = *scale;
                self.acc(*x, |gp| {
                    for ((gx, gy), y) in gp.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                        let dot: f64 = gy.iter().zip(y).map(|(a, b)| a.f64() * b.f64()).sum();
                        let dot = S::of(dot);
                        for j in 0..d {
                            gx[j] += scale * y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.nodes[*gamma].value.len();
                let gam = self.nodes[*gamma].value.data().to_vec();
                self.acc(*beta, |gb| {
                    let mut sums = vec![0f64; d];
                    for row in g.chunks(d) {
                        for (s, &y) in sums.iter_mut().zip(row) {
                            *s += y.f64();
                        }
                    }
                    gb.iter_mut().zip(sums).for_each(|(x, s)| *x += S::of(s));
                });
                self.acc(*gamma, |gg| {
                    let mut sums = vec![0f64; d];
                    for (row, h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            sums[j] += row[j].f64() * h[j].f64();
                        }
                    }
                    gg.iter_mut().zip(sums).for_each(|(x, s)| *x += S::of(s));
                });
                self.acc(*x, |gx| {
                    for (r, ((gxr, gy), h)) in gx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = 0f64;
                        let mut mean_dh_h = 0f64;
                        for j in 0..d {
                            let dh = gy[j].f64() * gam[j].f64();
                            mean_dh += dh;
                            mean_dh_h += dh * h[j].f64();
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        let inv = rstd[r].f64();
                        for j in 0..d {
                            let dh = gy[j].f64() * gam[j].f64();
                            gxr[j] += S::of(inv * (dh - mean_dh - h[j].f64() * mean_dh_h));
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d = self.nodes[*table].value.last_dim();
                self.acc(*table, |gt| {
                    for (row, &id) in g.chunks(d).zip(ids) {
                        for (x, &y) in gt[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.nodes[p].value.last_dim()).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    self.acc(p, |gp| {
                        for (r, dst) in gp.chunks_mut(w).enumerate() {
                            for (x, &y) in dst.iter_mut().zip(&g[r * total + offset..r * total + offset + w]) {
                                *x += y;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.nodes[*x].value.last_dim();
                let len = self.nodes[i].value.last_dim();
                let start = *start;
                self.acc(*x, |gx| {
                    for (r, src) in g.chunks(len).enumerate() {
                        for (x, &y) in gx[r * n + start..r * n + start + len].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let n = self.nodes[*x].value.last_dim();
                let start = *start;
                self.acc(*x, |gx| {
                    for (x, &y) in gx[start * n..start * n + g.len()].iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::SelectRows { mask, a, b } => {
                let d = self.nodes[i].value.last_dim();
                for (p, take) in [(*a, true), (*b, false)] {
                    self.acc(p, |gp| {
                        for (r, &m) in mask.iter().enumerate() {
                            if m == take {
                                for (x, &y) in gp[r * d..(r + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                                    *x += y;
                                }
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.acc(*a, |gp| gp.iter_mut().for_each(|x| *x += g0));
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len().max(1);
                let g0 = g[0] / S::of(n as f64);
                self.acc(*a, |gp| gp.iter_mut().for_each(|x| *x += g0));
            }
            Op::Reshape(a) => {
                self.acc(*a, |gp| gp.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            Op::Bmm(a, b) => {
                let (a, b) = (*a, *b);
                let sa = self.nodes[a].value.shape().to_vec();
                let sb = self.nodes[b].value.shape().to_vec();
                let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if self.nodes[a].requires_grad {
                    let bv = self.nodes[b].value.data().to_vec();
                    self.acc(a, |ga| {
                        for t in 0..batch {
                            gemm_nt(
                                &g[t * m * n..(t + 1) * m * n],
                                &bv[t * k * n..(t + 1) * k * n],
                                &mut ga[t * m * k..(t + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    });
                }
                if self.nodes[b].requires_grad {
                    let av = self.nodes[a].value.data().to_vec();
                    self.acc(b, |gb| {
                        for t in 0..batch {
                            gemm_tn(
                                &av[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut gb[t * k * n..(t + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    });
                }
            }
            Op::BmmNt(a, b) => {
                // out = A · Bᵀ with A [m,k], B [n,k]
                let (a, b) = (*a, *b);
                let sa = self.nodes[a].value.shape().to_vec();
                let sb = self.nodes[b].value.shape().to_vec();
                let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
                if self.nodes[a].requires_grad {
                    let bv = self.nodes[b].value.data().to_vec();
                    self.acc(a, |ga| {
                        for t in 0..batch {
                            gemm(
                                &g[t * m * n..(t + 1) * m * n],
                                &bv[t * n * k..(t + 1) * n * k],
                                &mut ga[t * m * k..(t + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    });
                }
                if self.nodes[b].requires_grad {
                    let av = self.nodes[a].value.data().to_vec();
                    self.acc(b, |gb| {
                        for t in 0..batch {
                            let gt = transpose(&g[t * m * n..(t + 1) * m * n], m, n);
                            gemm(&gt, &av[t * m * k..(t + 1) * m * k], &mut gb[t * n * k..(t + 1) * n * k], n, m, k);
                        }
                    });
                }
            }
            Op::SplitHeads { x, batch, seq, heads } => {
                let dh = self.nodes[i].value.last_dim();
                let back = permute_heads(g, *batch, *seq, *heads, dh, true);
                self.acc(*x, |gx| gx.iter_mut().zip(&back).for_each(|(x, &y)| *x += y));
            }
            Op::MergeHeads { x, batch, seq, heads } => {
                let dh = self.nodes[*x].value.last_dim();
                let back = permute_heads(g, *batch, *seq, *heads, dh, false);
                self.acc(*x, |gx| gx.iter_mut().zip(&back).for_each(|(x, &y)| *x += y));
            }
            Op::BceLogits { logits, targets, weights } => {
                let z = self.nodes[*logits].value.data().to_vec();
                let scale = g[0] / S::of(targets.len().max(1) as f64);
                self.acc(*logits, |gl| {
                    for (((x, &zi), &y), &w) in gl.iter_mut().zip(&z).zip(targets).zip(weights) {
                        *x += scale * w * (sigmoid(zi) - y);
                    }
                });
            }
            Op::MaskedCe { logits, targets, mask, probs, count } => {
                let c = self.nodes[*logits].value.last_dim();
                let scale = g[0] / S::of(*count as f64);
                self.acc(*logits, |gl| {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..c {
                            let onehot = if j == targets[r] { S::one() } else { S::zero() };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }

    /// Adds the gradients of parameter leaves into `params`.
    pub fn accumulate_into(&self, params: &mut ParamSet<S>) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, grad) {
                let p = params.get_mut(id);
                for (x, &y) in p.grad.data_mut().iter_mut().zip(g) {
                    *x += y;
                }
            }
        }
    }
}

/// Moves data between `[batch, seq, heads, dh]` (merged) and
/// `[batch, heads, seq, dh]` (split) layouts.
fn permute_heads<S: Scalar>(data: &[S], batch: usize, seq: usize, heads: usize, dh: usize, to_merged: bool) -> Vec<S> {
    let mut out = vec![S::zero(); data.len()];
    for b in 0..batch {
        for t in 0..seq {
            for h in 0..heads {
                let merged = ((b * seq + t) * heads + h) * dh;
                let split = ((b * heads + h) * seq + t) * dh;
                let (src, dst) = if to_merged { (split, merged) } else { (merged, split) };
                out[dst..dst + dh].copy_from_slice(&data[src..src + dh]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let mut g = Graph::<f32>::new();
        let z = g.input(Tensor::new(&[1], vec![0.0]).unwrap());
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).item(), 0.5);
        let bce = g.bce_with_logits(z, &[1.0], None).unwrap();
        assert!((g.value(bce).item() - std::f32::consts::LN_2).abs() < 1e-6);
        let u = g.input(Tensor::full(&[2, 4], 3.0));
        let sm = g.softmax(u);
        assert!(g.value(sm).data().iter().all(|&p| (p - 0.25).abs() < 1e-7));
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let mut g = Graph::<f32>::new();
        let z = g.leaf(Tensor::new(&[2], vec![100.0, -100.0]).unwrap(), true);
        let loss = g.bce_with_logits(z, &[0.0, 1.0], None).unwrap();
        assert!((g.value(loss).item() - 100.0).abs() < 1e-3);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(z).unwrap(), [0.5, -0.5]);
    }

    #[test]
    fn matmul_shapes_and_errors() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.input(Tensor::new(&[3, 4], vec![1., 0., 2., 1., 0., 1., 1., -1., 2., 1., 0., 3.]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), [2, 4]);
        assert_eq!(g.value(c).data(), [7., 5., 4., 8., 16., 11., 13., 17.]);
        let err = g.matmul(b, b).unwrap_err().to_string();
        assert!(err.contains("[3, 4]"), "{err}");
    }

    #[test]
    fn simple_gradients() {
        let mut g = Graph::<f32>::new();
        let w = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), [1.0, 1.0, 1.0]);
        assert!(g.backward(s).is_err());

        let mut g = Graph::<f32>::new();
        let w = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        g.backward(half).unwrap();
        assert_eq!(g.grad(w).unwrap(), [1.0, -2.0, 0.5]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f32>::new();
        let w = g.leaf(Tensor::zeros(&[2]), true);
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn softmax_rows_and_layer_norm_mean() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_fn(&[4, 7], |i| (i as f32 * 0.37).sin() * 5.0));
        let sm = g.softmax(x);
        for row in g.value(sm).data().chunks(7) {
            assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let gamma = g.input(Tensor::full(&[7], 1.0));
        let beta = g.input(Tensor::zeros(&[7]));
        let ln = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for row in g.value(ln).data().chunks(7) {
            assert!((row.iter().map(|&v| v as f64).sum::<f64>() / 7.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn heads_round_trip() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_fn(&[6, 8], |i| i as f32));
        let s = g.split_heads(x, 2, 3, 4).unwrap();
        assert_eq!(g.value(s).shape(), [8, 3, 2]);
        // batch 0, head 1, t 2 -> merged row 2, cols 2..4
        assert_eq!(&g.value(s).data()[(3 * 2 + 2 * 2)..(3 * 2 + 2 * 2 + 2)], [18.0, 19.0]);
        let m = g.merge_heads(s, 2, 3, 4).unwrap();
        assert_eq!(g.value(m), g.value(x));
    }
}
