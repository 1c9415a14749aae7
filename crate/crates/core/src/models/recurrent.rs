//! Embedding → one GRU or LSTM layer → final state → linear → logit.
//!
//! Batches are left-padded and processed time-major. At padding steps the
//! state is carried over unchanged, so a row's result does not depend on
//! how much padding its batch needed.

use super::batch::Batch;
use super::layers::{maybe_drop, Dropout, Embedding, GruCell, Linear, LstmCell};
use super::nn::{self, Network, STREAM_INIT};
use super::{ModelConfig, ModelKind, TrainingMeta};
use crate::corpus::CodeSequence;
use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamSet, Scalar, Tensor, Var};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Gru(GruCell),
    Lstm(LstmCell),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentNet {
    pub embed: Embedding,
    pub cell: Cell,
    pub out: Linear,
    pub hidden: usize,
    pub reverse: bool,
}

impl RecurrentNet {
    pub fn new<S: Scalar>(
        ps: &mut ParamSet<S>,
        kind: ModelKind,
        vocab_size: usize,
        hidden: usize,
        reverse: bool,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let embed = Embedding::new(ps, "embed", vocab_size, hidden, 0.1, rng);
        let cell = match kind {
            ModelKind::Gru => Cell::Gru(GruCell::new(ps, "gru", hidden, hidden, rng)),
            ModelKind::Lstm => Cell::Lstm(LstmCell::new(ps, "lstm", hidden, hidden, rng)),
            k => return Err(Error::Model(format!("{k} is not a recurrent model"))),
        };
        let out = Linear::new(ps, "out", hidden, 1, true, rng);
        Ok(RecurrentNet {
            embed,
            cell,
            out,
            hidden,
            reverse,
        })
    }

    /// The network for `config`, initialized from its seed.
    pub fn build(config: &ModelConfig, vocab_size: usize, ps: &mut ParamSet) -> Self {
        let mut rng = StreamRng::new(config.seed, STREAM_INIT);
        RecurrentNet::new(ps, config.kind, vocab_size, config.hidden_size, config.reverse_input, &mut rng)
            .expect("recurrent kind")
    }

    /// Final hidden state per row, `[rows, hidden]`.
    pub fn encode<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, batch: &Batch, mut drop: Option<&mut Dropout>) -> Result<Var> {
        let (b, h) = (batch.size(), self.hidden);
        let x = self.embed.forward(g, ps, &batch.time_major_ids())?;
        let x = maybe_drop(g, &mut drop, x)?;
        let mut state = g.input(Tensor::zeros(&[b, h]));
        match self.cell {
            Cell::Gru(cell) => {
                let xw = cell.project_inputs(g, ps, x)?;
                let bound = cell.bind(g, ps);
                for t in 0..batch.len {
                    let valid = batch.valid_at(t);
                    if !valid.iter().any(|&v| v) {
                        continue;
                    }
                    let xt = g.slice_rows(xw, t * b, b)?;
                    let next = bound.step(g, xt, state)?;
                    state = carry(g, &valid, next, state)?;
                }
            }
            Cell::Lstm(cell) => {
                let xw = cell.project_inputs(g, ps, x)?;
                let bound = cell.bind(g, ps);
                let mut c = g.input(Tensor::zeros(&[b, h]));
                for t in 0..batch.len {
                    let valid = batch.valid_at(t);
                    if !valid.iter().any(|&v| v) {
                        continue;
                    }
                    let xt = g.slice_rows(xw, t * b, b)?;
                    let (h2, c2) = bound.step(g, xt, state, c)?;
                    state = carry(g, &valid, h2, state)?;
                    c = carry(g, &valid, c2, c)?;
                }
            }
        }
        Ok(state)
    }
}

fn carry<S: Scalar>(g: &mut Graph<S>, valid: &[bool], next: Var, prev: Var) -> Result<Var> {
    if valid.iter().all(|&v| v) {
        Ok(next)
    } else {
        g.select_rows(valid, next, prev)
    }
}

impl Network for RecurrentNet {
    fn prefix(&self) -> Option<u32> {
        None
    }

    fn reverse(&self) -> bool {
        self.reverse
    }

    fn logits<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, batch: &Batch, mut drop: Option<&mut Dropout>) -> Result<Var> {
        let h = self.encode(g, ps, batch, drop.as_deref_mut())?;
        let h = maybe_drop(g, &mut drop, h)?;
        self.out.forward(g, ps, h)
    }
}

pub(crate) fn fit(
    config: &ModelConfig,
    vocab_size: usize,
    train: &[CodeSequence],
    valid: &[CodeSequence],
    meta: &mut TrainingMeta,
) -> Result<(RecurrentNet, ParamSet)> {
    let mut ps = ParamSet::new();
    let net = RecurrentNet::build(config, vocab_size, &mut ps);
    meta.degenerate = train.iter().all(|s| s.label == train[0].label);
    nn::fit(&net, &mut ps, config, train, valid, meta)?;
    Ok((net, ps))
}
