//! Finite-difference checks of every neural layer on random shapes.
//!
//! Each case builds the layer in `f64`, replaces all parameter values with
//! seeded uniform draws (so LayerNorm gains and forget biases are not at
//! their special initial values), and reduces the layer output to a scalar
//! with a fixed random weighting. Inputs are parameters too, so input
//! gradients are checked along with weights.
//!
//! Layers followed by LayerNorm use widths of at least 4. Over two
//! features the normalization is close to a step function, and a central
//! difference at [`STEP`] no longer approximates the slope.

use super::batch::Batch;
use super::layers::{Dropout, Embedding, EncoderLayer, GruCell, LayerNorm, Layout, Linear, LstmCell};
use super::nn::Network;
use super::recurrent::RecurrentNet;
use super::transformer::{TransformerConfig, TransformerNet};
use super::ModelKind;
use crate::corpus::NUM_SPECIAL;
use crate::error::Result;
use crate::numcore::gradcheck::{check, GradCheck};
use crate::numcore::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::rng::StreamRng;

/// Central-difference step.
pub const STEP: f64 = 1e-3;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-3;
/// Entries compared per case.
const ENTRIES: usize = 48;

pub const LAYERS: [&str; 12] = [
    "linear",
    "embedding",
    "layer_norm",
    "dropout",
    "masked_softmax",
    "attention",
    "encoder_layer",
    "gru_cell",
    "lstm_cell",
    "gru_network",
    "lstm_network",
    "transformer_network",
];

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub seed: u64,
    /// Human-readable shape summary.
    pub shape: String,
    pub result: GradCheck,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.result.checked > 0 && self.result.max_rel_error <= TOLERANCE
    }
}

struct Case {
    ps: ParamSet<f64>,
    weights: Vec<f64>,
    rng: StreamRng,
}

impl Case {
    fn new(seed: u64, salt: u64) -> Case {
        Case {
            ps: ParamSet::new(),
            weights: vec![],
            rng: StreamRng::new(seed, 500 + salt),
        }
    }

    fn input(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let t = Tensor::from_fn(shape, |_| 0.0);
        self.ps.add(name, t)
    }

    /// Redraws every parameter and the output weighting of `out_len` values.
    fn randomize(&mut self, out_len: usize) {
        let rng = &mut self.rng;
        for p in self.ps.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.uniform() * 1.6 - 0.8);
        }
        self.weights = (0..out_len).map(|_| rng.uniform() * 2.0 - 1.0).collect();
    }

    fn between(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.between(lo as i64, hi as i64) as usize
    }

    fn run(mut self, forward: impl FnMut(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>) -> Result<GradCheck> {
        let weights = self.weights.clone();
        let mut forward = forward;
        check(&mut self.ps, STEP, ENTRIES, move |g, ps| {
            let out = forward(g, ps)?;
            let shape = g.value(out).shape().to_vec();
            let w = g.input(Tensor::new(&shape, weights.clone())?);
            let prod = g.mul(out, w)?;
            Ok(g.sum(prod))
        })
    }
}

/// Random id sequences with lengths in `1..=max_len`, ids past the specials.
fn sequences(rng: &mut StreamRng, n: usize, max_len: usize, vocab: usize) -> Vec<Vec<u32>> {
    (0..n)
        .map(|_| {
            let len = rng.between(1, max_len as i64) as usize;
            (0..len)
                .map(|_| NUM_SPECIAL + rng.below((vocab - NUM_SPECIAL as usize) as u64) as u32)
                .collect()
        })
        .collect()
}

fn output_len(ps: &ParamSet<f64>, forward: &mut impl FnMut(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>) -> Result<usize> {
    let mut g = Graph::new();
    let out = forward(&mut g, ps)?;
    Ok(g.value(out).len())
}

fn finish(mut case: Case, mut forward: impl FnMut(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>) -> Result<GradCheck> {
    case.randomize(0);
    let n = output_len(&case.ps, &mut forward)?;
    case.randomize(n);
    case.run(forward)
}

/// Checks one layer on the random shape drawn from `seed`.
pub fn check_layer(layer: &str, seed: u64) -> Result<(String, GradCheck)> {
    let salt = LAYERS.iter().position(|&l| l == layer).unwrap_or(LAYERS.len()) as u64;
    let mut c = Case::new(seed, salt);
    let mut init = StreamRng::new(seed, 900 + salt);
    match layer {
        "linear" => {
            let (n, i, o) = (c.between(1, 4), c.between(1, 5), c.between(1, 5));
            let x = c.input("x", &[n, i]);
            let lin = Linear::new(&mut c.ps, "lin", i, o, true, &mut init);
            Ok((format!("x [{n},{i}] -> [{n},{o}]"), finish(c, move |g, ps| {
                let x = g.param(ps, x);
                lin.forward(g, ps, x)
            })?))
        }
        "embedding" => {
            let (rows, dim, n) = (c.between(2, 7), c.between(1, 5), c.between(1, 8));
            let ids: Vec<usize> = (0..n).map(|_| c.between(0, rows - 1)).collect();
            let emb = Embedding::new(&mut c.ps, "emb", rows, dim, 0.1, &mut init);
            Ok((format!("table [{rows},{dim}], {n} ids"), finish(c, move |g, ps| emb.forward(g, ps, &ids))?))
        }
        "layer_norm" => {
            let (n, d) = (c.between(1, 4), c.between(2, 7));
            let x = c.input("x", &[n, d]);
            let ln = LayerNorm::new(&mut c.ps, "ln", d);
            Ok((format!("x [{n},{d}]"), finish(c, move |g, ps| {
                let x = g.param(ps, x);
                ln.forward(g, ps, x)
            })?))
        }
        "dropout" => {
            let (n, d) = (c.between(1, 4), c.between(1, 6));
            let x = c.input("x", &[n, d]);
            Ok((format!("x [{n},{d}], rate 0.3"), finish(c, move |g, ps| {
                // Same mask on every evaluation.
                let mut drop = Dropout::new(0.3, StreamRng::new(seed, 77));
                let x = g.param(ps, x);
                let y = g.tanh(x);
                drop.apply(g, y)
            })?))
        }
        "masked_softmax" => {
            let (b, h, q, k) = (c.between(1, 2), c.between(1, 3), c.between(1, 4), c.between(2, 5));
            let x = c.input("scores", &[b * h, q, k]);
            let valid: Vec<bool> = (0..b * k).map(|i| i % k == k - 1 || c.rng.chance(0.6)).collect();
            Ok((format!("scores [{},{q},{k}], {h} heads", b * h), finish(c, move |g, ps| {
                let x = g.param(ps, x);
                g.masked_softmax(x, 0.7, &valid, h)
            })?))
        }
        "attention" | "encoder_layer" => {
            let (b, l, heads) = (c.between(1, 2), c.between(1, 4), c.between(1, 2));
            let dim = heads * c.between(4 / heads, 5);
            let ff = c.between(2, 5);
            let valid: Vec<bool> = (0..b)
                .flat_map(|_| {
                    let pad = c.between(0, l - 1);
                    (0..l).map(move |t| t >= pad)
                })
                .collect();
            let x = c.input("x", &[b * l, dim]);
            let enc = EncoderLayer::new(&mut c.ps, "enc", dim, heads, ff, &mut init);
            let full = layer == "encoder_layer";
            Ok((format!("batch {b}, len {l}, dim {dim}, heads {heads}, ff {ff}"), finish(c, move |g, ps| {
                let x = g.param(ps, x);
                let layout = Layout {
                    batch: b,
                    len: l,
                    valid: &valid,
                };
                if full {
                    enc.forward(g, ps, x, layout, &mut None)
                } else {
                    enc.attention(g, ps, x, layout)
                }
            })?))
        }
        "gru_cell" | "lstm_cell" => {
            let (b, e, hd) = (c.between(1, 3), c.between(1, 4), c.between(1, 4));
            let xs: Vec<ParamId> = (0..3).map(|t| c.input(&format!("x{t}"), &[b, e])).collect();
            let h0 = c.input("h0", &[b, hd]);
            let c0 = c.input("c0", &[b, hd]);
            let gru = layer == "gru_cell";
            let gcell = GruCell::new(&mut c.ps, "gru", e, hd, &mut init);
            let lcell = LstmCell::new(&mut c.ps, "lstm", e, hd, &mut init);
            Ok((format!("batch {b}, input {e}, hidden {hd}, 3 steps"), finish(c, move |g, ps| {
                let mut h = g.param(ps, h0);
                let mut cs = g.param(ps, c0);
                if gru {
                    let bound = gcell.bind(g, ps);
                    for &x in &xs {
                        let x = g.param(ps, x);
                        let xw = gcell.project_inputs(g, ps, x)?;
                        h = bound.step(g, xw, h)?;
                    }
                    Ok(h)
                } else {
                    let bound = lcell.bind(g, ps);
                    for &x in &xs {
                        let x = g.param(ps, x);
                        let xw = lcell.project_inputs(g, ps, x)?;
                        (h, cs) = bound.step(g, xw, h, cs)?;
                    }
                    g.concat_cols(&[h, cs])
                }
            })?))
        }
        "gru_network" | "lstm_network" => {
            let kind = if layer == "gru_network" { ModelKind::Gru } else { ModelKind::Lstm };
            let (vocab, hd, n) = (c.between(5, 9), c.between(1, 4), c.between(1, 3));
            let seqs = sequences(&mut c.rng, n, 4, vocab);
            let reverse = c.rng.chance(0.5);
            let net = RecurrentNet::new(&mut c.ps, kind, vocab, hd, reverse, &mut init)?;
            let batch = Batch::build(&seqs, &(0..n).collect::<Vec<_>>(), None, reverse);
            Ok((format!("vocab {vocab}, hidden {hd}, {n} rows of up to {} steps", batch.len), finish(c, move |g, ps| {
                net.logits(g, ps, &batch, None)
            })?))
        }
        "transformer_network" => {
            let heads = c.between(1, 2);
            let dim = heads * c.between(4 / heads, 5);
            let (vocab, n) = (c.between(5, 9), c.between(1, 3));
            let cfg = TransformerConfig {
                layers: c.between(1, 2),
                heads,
                ff_size: c.between(2, 5),
                max_positions: 6,
                ..Default::default()
            };
            let seqs = sequences(&mut c.rng, n, 4, vocab);
            let net = TransformerNet::new(&mut c.ps, &cfg, vocab, dim, &mut init);
            let batch = Batch::build(&seqs, &(0..n).collect::<Vec<_>>(), Some(crate::corpus::CLS), false);
            let at: Vec<usize> = (0..n).map(|r| r * batch.len + batch.len - 1).collect();
            let shape = format!("vocab {vocab}, dim {dim}, heads {heads}, {} layers, {n} rows", cfg.layers);
            Ok((shape, finish(c, move |g, ps| {
                let cls = net.logits(g, ps, &batch, None)?;
                let mlm = net.mlm_logits(g, ps, &batch, &at, None)?;
                let mlm = g.reshape(mlm, &[1, at.len() * vocab])?;
                let cls = g.reshape(cls, &[1, n])?;
                g.concat_cols(&[cls, mlm])
            })?))
        }
        other => Err(crate::error::Error::Model(format!("no gradient check for layer {other:?}"))),
    }
}

/// Every layer in [`LAYERS`] on `n_shapes` random shapes each.
pub fn run_suite(n_shapes: usize, base_seed: u64) -> Result<Vec<LayerCheck>> {
    let mut out = Vec::new();
    for layer in LAYERS {
        for k in 0..n_shapes as u64 {
            let seed = base_seed + k;
            let (shape, result) = check_layer(layer, seed)?;
            out.push(LayerCheck {
                layer,
                seed,
                shape,
                result,
            });
        }
    }
    Ok(out)
}
