//! Neural building blocks. Each layer owns only parameter handles; values
//! live in a [`ParamSet`], so the same layer runs in `f32` for training and
//! in `f64` for gradient checks. `bind` records the parameters in a graph
//! once per forward pass, and the bound form is then applied any number of
//! times (once per time step for the recurrent cells).

use crate::error::Result;
use crate::numcore::{Graph, ParamId, ParamSet, Scalar, Tensor, Var};
use crate::rng::StreamRng;

/// Uniform values in `[-a, a]`.
pub fn uniform_tensor<S: Scalar>(rng: &mut StreamRng, shape: &[usize], a: f64) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::of((rng.uniform() * 2.0 - 1.0) * a))
}

fn glorot(d_in: usize, d_out: usize) -> f64 {
    (6.0 / (d_in + d_out) as f64).sqrt()
}

/// Inverted dropout with a seeded mask stream.
pub struct Dropout {
    pub rate: f64,
    rng: StreamRng,
}

impl Dropout {
    pub fn new(rate: f64, rng: StreamRng) -> Self {
        Dropout { rate, rng }
    }

    pub fn apply<S: Scalar>(&mut self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = g.value(x).shape().to_vec();
        let rng = &mut self.rng;
        let mask = Tensor::from_fn(&shape, |_| {
            if rng.uniform() < keep {
                S::of(1.0 / keep)
            } else {
                S::zero()
            }
        });
        let m = g.input(mask);
        g.mul(x, m)
    }
}

/// Applies dropout when training.
pub fn maybe_drop<S: Scalar>(g: &mut Graph<S>, drop: &mut Option<&mut Dropout>, x: Var) -> Result<Var> {
    match drop {
        Some(d) => d.apply(g, x),
        None => Ok(x),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    w: Var,
    b: Option<Var>,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new<S: Scalar>(ps: &mut ParamSet<S>, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut StreamRng) -> Self {
        let w = ps.add(format!("{name}.w"), uniform_tensor(rng, &[d_in, d_out], glorot(d_in, d_out)));
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Linear { w, b, d_in, d_out }
    }

    pub fn zeros<S: Scalar>(ps: &mut ParamSet<S>, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = ps.add(format!("{name}.w"), Tensor::zeros(&[d_in, d_out]));
        let b = Some(ps.add(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Linear { w, b, d_in, d_out }
    }

    pub fn bind<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>) -> BoundLinear {
        BoundLinear {
            w: g.param(ps, self.w),
            b: self.b.map(|b| g.param(ps, b)),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, x: Var) -> Result<Var> {
        self.bind(g, ps).apply(g, x)
    }
}

impl BoundLinear {
    pub fn apply<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.w)?;
        match self.b {
            Some(b) => g.add_bias(y, b),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<S: Scalar>(ps: &mut ParamSet<S>, name: &str, rows: usize, dim: usize, scale: f64, rng: &mut StreamRng) -> Self {
        let table = ps.add(name, uniform_tensor(rng, &[rows, dim], scale));
        Embedding { table, rows, dim }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, ids: &[usize]) -> Result<Var> {
        let t = g.param(ps, self.table);
        g.embedding(t, ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<S: Scalar>(ps: &mut ParamSet<S>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: ps.add(format!("{name}.g"), Tensor::full(&[dim], S::one())),
            beta: ps.add(format!("{name}.b"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(ps, self.gamma), g.param(ps, self.beta));
        g.layer_norm(x, gm, bt, Self::EPS)
    }
}

/// Gated recurrent unit:
///
/// ```text
/// r = σ(x·Wr + h·Ur + br)    z = σ(x·Wz + h·Uz + bz)
/// n = tanh(x·Wn + bn + r ⊙ (h·Un + cn))
/// h' = n + z ⊙ (h − n)
/// ```
///
/// The input weights are stacked as `wx: [E, 3H]` in `r, z, n` order so the
/// input projection of a whole sequence is one matrix product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruCell {
    pub wx: Linear,
    pub wh: Linear,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundGru {
    wh: BoundLinear,
    hidden: usize,
}

impl GruCell {
    pub fn new<S: Scalar>(ps: &mut ParamSet<S>, name: &str, input: usize, hidden: usize, rng: &mut StreamRng) -> Self {
        GruCell {
            wx: Linear::new(ps, &format!("{name}.wx"), input, 3 * hidden, true, rng),
            wh: Linear::new(ps, &format!("{name}.wh"), hidden, 3 * hidden, true, rng),
            hidden,
        }
    }

    /// `x: [N, E]` → `[N, 3H]`.
    pub fn project_inputs<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, x: Var) -> Result<Var> {
        self.wx.forward(g, ps, x)
    }

    pub fn bind<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>) -> BoundGru {
        BoundGru {
            wh: self.wh.bind(g, ps),
            hidden: self.hidden,
        }
    }
}

impl BoundGru {
    /// One step from projected inputs `xw: [B, 3H]` and state `h: [B, H]`.
    pub fn step<S: Scalar>(&self, g: &mut Graph<S>, xw: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let hu = self.wh.apply(g, h)?;
        let xrz = g.slice_cols(xw, 0, 2 * hd)?;
        let hrz = g.slice_cols(hu, 0, 2 * hd)?;
        let rz = g.add(xrz, hrz)?;
        let rz = g.sigmoid(rz);
        let r = g.slice_cols(rz, 0, hd)?;
        let z = g.slice_cols(rz, hd, hd)?;
        let xn = g.slice_cols(xw, 2 * hd, hd)?;
        let hn = g.slice_cols(hu, 2 * hd, hd)?;
        let rhn = g.mul(r, hn)?;
        let n = g.add(xn, rhn)?;
        let n = g.tanh(n);
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }
}

/// Long short-term memory cell with gates stacked `i, f, g, o`:
///
/// ```text
/// c' = σ(f) ⊙ c + σ(i) ⊙ tanh(g)    h' = σ(o) ⊙ tanh(c')
/// ```
///
/// The forget-gate bias starts at 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmCell {
    pub wx: Linear,
    pub wh: Linear,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLstm {
    wh: BoundLinear,
    hidden: usize,
}

impl LstmCell {
    pub fn new<S: Scalar>(ps: &mut ParamSet<S>, name: &str, input: usize, hidden: usize, rng: &mut StreamRng) -> Self {
        let wx = Linear::new(ps, &format!("{name}.wx"), input, 4 * hidden, true, rng);
        let wh = Linear::new(ps, &format!("{name}.wh"), hidden, 4 * hidden, false, rng);
        let b = ps.get_mut(wx.b.expect("bias")).value.data_mut();
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = S::one());
        LstmCell { wx, wh, hidden }
    }

    /// `x: [N, E]` → `[N, 4H]`.
    pub fn project_inputs<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, x: Var) -> Result<Var> {
        self.wx.forward(g, ps, x)
    }

    pub fn bind<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>) -> BoundLstm {
        BoundLstm {
            wh: self.wh.bind(g, ps),
            hidden: self.hidden,
        }
    }
}

impl BoundLstm {
    /// One step; returns the new `(h, c)`.
    pub fn step<S: Scalar>(&self, g: &mut Graph<S>, xw: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let hu = self.wh.apply(g, h)?;
        let gates = g.add(xw, hu)?;
        let ifg = g.slice_cols(gates, 0, 2 * hd)?;
        let ifg = g.sigmoid(ifg);
        let i = g.slice_cols(ifg, 0, hd)?;
        let f = g.slice_cols(ifg, hd, hd)?;
        let cand = g.slice_cols(gates, 2 * hd, hd)?;
        let cand = g.tanh(cand);
        let o = g.slice_cols(gates, 3 * hd, hd)?;
        let o = g.sigmoid(o);
        let fc = g.mul(f, c)?;
        let ig = g.mul(i, cand)?;
        let c2 = g.add(fc, ig)?;
        let tc = g.tanh(c2);
        let h2 = g.mul(o, tc)?;
        Ok((h2, c2))
    }
}

/// Post-norm transformer encoder layer with GELU feed-forward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderLayer {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
    pub heads: usize,
}

/// Rows of a padded batch: `batch` sequences of `len` positions each,
/// flattened row-major; `valid[b*len + t]` is false at padding.
#[derive(Debug, Clone, Copy)]
pub struct Layout<'a> {
    pub batch: usize,
    pub len: usize,
    pub valid: &'a [bool],
}

impl EncoderLayer {
    pub fn new<S: Scalar>(ps: &mut ParamSet<S>, name: &str, dim: usize, heads: usize, ff: usize, rng: &mut StreamRng) -> Self {
        EncoderLayer {
            wq: Linear::new(ps, &format!("{name}.q"), dim, dim, true, rng),
            wk: Linear::new(ps, &format!("{name}.k"), dim, dim, true, rng),
            wv: Linear::new(ps, &format!("{name}.v"), dim, dim, true, rng),
            wo: Linear::new(ps, &format!("{name}.o"), dim, dim, true, rng),
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            ff1: Linear::new(ps, &format!("{name}.ff1"), dim, ff, true, rng),
            ff2: Linear::new(ps, &format!("{name}.ff2"), ff, dim, true, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            heads,
        }
    }

    /// Multi-head self-attention with padded keys masked out.
    pub fn attention<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, x: Var, layout: Layout) -> Result<Var> {
        let (b, l, h) = (layout.batch, layout.len, self.heads);
        let dh = self.wq.d_out / h;
        let q = self.wq.forward(g, ps, x)?;
        let k = self.wk.forward(g, ps, x)?;
        let v = self.wv.forward(g, ps, x)?;
        let q = g.split_heads(q, b, l, h)?;
        let k = g.split_heads(k, b, l, h)?;
        let v = g.split_heads(v, b, l, h)?;
        let scores = g.bmm_nt(q, k)?;
        let attn = g.masked_softmax(scores, S::of(1.0 / (dh as f64).sqrt()), layout.valid, h)?;
        let ctx = g.bmm(attn, v)?;
        let ctx = g.merge_heads(ctx, b, l, h)?;
        self.wo.forward(g, ps, ctx)
    }

    /// `x: [batch*len, dim]` → same shape.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamSet<S>,
        x: Var,
        layout: Layout,
        drop: &mut Option<&mut Dropout>,
    ) -> Result<Var> {
        let a = self.attention(g, ps, x, layout)?;
        let a = maybe_drop(g, drop, a)?;
        let x = g.add(x, a)?;
        let x = self.ln1.forward(g, ps, x)?;
        let f = self.ff1.forward(g, ps, x)?;
        let f = g.gelu(f);
        let f = self.ff2.forward(g, ps, f)?;
        let f = maybe_drop(g, drop, f)?;
        let x = g.add(x, f)?;
        self.ln2.forward(g, ps, x)
    }
}
