//! Transformer encoder with masked-code pre-training.
//!
//! Input rows are `[PAD]… [CLS] c₁ … cₙ`. Positions count from the `[CLS]`
//! token (position 0), so they do not depend on padding. The encoder is
//! token + position embeddings, layer norm, then post-norm encoder layers.
//!
//! * Pre-training picks each non-`[CLS]` code with probability
//!   `mask_rate`; a picked code is replaced by `[MASK]` 80% of the time, by
//!   a random code 10% of the time, and left unchanged otherwise. The model
//!   predicts the original codes at picked positions.
//! * Fine-tuning reads the encoding at `[CLS]` through a single output unit
//!   whose weights start at zero, trained with binary cross-entropy.

use serde::{Deserialize, Serialize};

use super::batch::{plan_batches, Batch};
use super::layers::{maybe_drop, Dropout, Embedding, EncoderLayer, LayerNorm, Layout, Linear};
use super::nn::{self, Network, STREAM_BATCHES, STREAM_DROPOUT, STREAM_INIT, STREAM_MASKING};
use super::{ModelConfig, ModelKind, TrainedModel, TrainingMeta};
use crate::corpus::{CodeSequence, Vocabulary, CLS, MASK, NUM_SPECIAL};
use crate::error::{Error, Result};
use crate::numcore::{clip_grad_norm, Adam, Graph, ParamSet, Scalar, Var};
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub ff_size: usize,
    /// Learned position embeddings; must cover `max_len + 1` (for `[CLS]`).
    pub max_positions: usize,
    /// Pre-train on unlabeled patients before fine-tuning.
    pub pretrain: bool,
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
    pub mask_rate: f64,
    /// Fine-tune only the output unit.
    pub freeze_encoder: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            layers: 2,
            heads: 4,
            ff_size: 256,
            max_positions: 513,
            pretrain: true,
            pretrain_epochs: 10,
            pretrain_learning_rate: 1e-3,
            mask_rate: 0.15,
            freeze_encoder: false,
        }
    }
}

impl TransformerConfig {
    pub fn violations(&self, hidden: usize, max_len: usize) -> Vec<String> {
        let mut v = Vec::new();
        if self.layers == 0 {
            v.push("transformer: layers must be positive".into());
        }
        if self.heads == 0 || hidden % self.heads != 0 {
            v.push(format!(
                "transformer: hidden_size {hidden} must be divisible by heads {}",
                self.heads
            ));
        }
        if self.ff_size == 0 {
            v.push("transformer: ff_size must be positive".into());
        }
        if self.max_positions < max_len + 1 {
            v.push(format!(
                "transformer: max_positions {} must be at least max_len + 1 = {}",
                self.max_positions,
                max_len + 1
            ));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            v.push(format!("transformer: mask_rate {} must be in (0, 1]", self.mask_rate));
        }
        if self.pretrain && self.pretrain_epochs == 0 {
            v.push("transformer: pretrain_epochs must be positive when pretraining".into());
        }
        if self.pretrain_learning_rate.is_nan() || self.pretrain_learning_rate <= 0.0 {
            v.push("transformer: pretrain_learning_rate must be positive".into());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerNet {
    pub tokens: Embedding,
    pub positions: Embedding,
    pub embed_ln: LayerNorm,
    pub layers: Vec<EncoderLayer>,
    pub head: Linear,
    pub mlm_dense: Linear,
    pub mlm_ln: LayerNorm,
    pub mlm_out: Linear,
    pub dim: usize,
    pub vocab_size: usize,
}

/// Name prefix of the parameters fine-tuning starts from.
const ENCODER: &str = "enc.";

impl TransformerNet {
    pub fn new<S: Scalar>(ps: &mut ParamSet<S>, cfg: &TransformerConfig, vocab_size: usize, dim: usize, rng: &mut StreamRng) -> Self {
        let tokens = Embedding::new(ps, "enc.tokens", vocab_size, dim, 0.1, rng);
        let positions = Embedding::new(ps, "enc.positions", cfg.max_positions, dim, 0.1, rng);
        let embed_ln = LayerNorm::new(ps, "enc.embed_ln", dim);
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(ps, &format!("enc.layer{i}"), dim, cfg.heads, cfg.ff_size, rng))
            .collect();
        let mlm_dense = Linear::new(ps, "mlm.dense", dim, dim, true, rng);
        let mlm_ln = LayerNorm::new(ps, "mlm.ln", dim);
        let mlm_out = Linear::new(ps, "mlm.out", dim, vocab_size, true, rng);
        let head = Linear::zeros(ps, "head", dim, 1);
        TransformerNet {
            tokens,
            positions,
            embed_ln,
            layers,
            head,
            mlm_dense,
            mlm_ln,
            mlm_out,
            dim,
            vocab_size,
        }
    }

    pub fn build(config: &ModelConfig, vocab_size: usize, ps: &mut ParamSet) -> Self {
        let mut rng = StreamRng::new(config.seed, STREAM_INIT);
        TransformerNet::new(ps, &config.transformer, vocab_size, config.hidden_size, &mut rng)
    }

    pub fn max_positions(&self) -> usize {
        self.positions.rows
    }

    /// Encodings of every batch position, `[rows * len, dim]`.
    pub fn encode<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, batch: &Batch, mut drop: Option<&mut Dropout>) -> Result<Var> {
        if batch.len > self.max_positions() {
            return Err(Error::Model(format!(
                "sequence of {} positions exceeds max_positions {}",
                batch.len,
                self.max_positions()
            )));
        }
        let pos_ids: Vec<usize> = (0..batch.size())
            .flat_map(|r| (0..batch.len).map(move |t| (r, t)))
            .map(|(r, t)| t.saturating_sub(batch.pads[r]))
            .collect();
        let tok = self.tokens.forward(g, ps, &batch.ids)?;
        let pos = self.positions.forward(g, ps, &pos_ids)?;
        let x = g.add(tok, pos)?;
        let x = self.embed_ln.forward(g, ps, x)?;
        let mut x = maybe_drop(g, &mut drop, x)?;
        let layout = Layout {
            batch: batch.size(),
            len: batch.len,
            valid: &batch.valid,
        };
        for layer in &self.layers {
            x = layer.forward(g, ps, x, layout, &mut drop)?;
        }
        Ok(x)
    }

    /// Vocabulary logits at the flat batch positions `at`, `[at.len(), vocab]`.
    pub fn mlm_logits<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamSet<S>,
        batch: &Batch,
        at: &[usize],
        drop: Option<&mut Dropout>,
    ) -> Result<Var> {
        let x = self.encode(g, ps, batch, drop)?;
        let x = g.gather_rows(x, at)?;
        let x = self.mlm_dense.forward(g, ps, x)?;
        let x = g.gelu(x);
        let x = self.mlm_ln.forward(g, ps, x)?;
        self.mlm_out.forward(g, ps, x)
    }
}

impl Network for TransformerNet {
    fn prefix(&self) -> Option<u32> {
        Some(CLS)
    }

    fn reverse(&self) -> bool {
        false
    }

    fn logits<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, batch: &Batch, mut drop: Option<&mut Dropout>) -> Result<Var> {
        let x = self.encode(g, ps, batch, drop.as_deref_mut())?;
        let cls: Vec<usize> = (0..batch.size()).map(|r| r * batch.len + batch.pads[r]).collect();
        let c = g.gather_rows(x, &cls)?;
        let c = maybe_drop(g, &mut drop, c)?;
        self.head.forward(g, ps, c)
    }
}

/// Picks and corrupts positions for one masked-code batch. Returns the
/// flat positions and their original ids; `batch.ids` is modified in place.
pub fn mask_batch(batch: &mut Batch, vocab_size: usize, rate: f64, rng: &mut StreamRng) -> (Vec<usize>, Vec<usize>) {
    let mut at = Vec::new();
    let mut targets = Vec::new();
    let candidates: Vec<usize> = (0..batch.size())
        .flat_map(|r| {
            let start = r * batch.len + batch.pads[r] + 1;
            start..(r + 1) * batch.len
        })
        .collect();
    for &i in &candidates {
        if rng.uniform() < rate {
            at.push(i);
        }
    }
    if at.is_empty() && !candidates.is_empty() {
        at.push(candidates[rng.below(candidates.len() as u64) as usize]);
    }
    let n_codes = vocab_size.saturating_sub(NUM_SPECIAL as usize) as u64;
    for &i in &at {
        targets.push(batch.ids[i]);
        let u = rng.uniform();
        if u < 0.8 {
            batch.ids[i] = MASK as usize;
        } else if u < 0.9 && n_codes > 0 {
            batch.ids[i] = NUM_SPECIAL as usize + rng.below(n_codes) as usize;
        }
    }
    (at, targets)
}

/// Masked-code pre-training on unlabeled sequences. The returned model
/// holds the encoder and the masked-code head; its classification unit is
/// untrained.
pub fn pretrain_transformer<T: AsRef<[u32]>>(config: &ModelConfig, vocab: &Vocabulary, corpus: &[T]) -> Result<TrainedModel> {
    if config.kind != ModelKind::Transformer {
        return Err(Error::Model(format!("cannot pre-train a {} model", config.kind)));
    }
    let tc = &config.transformer;
    if !(tc.mask_rate > 0.0 && tc.mask_rate <= 1.0) {
        return Err(Error::Config(vec![format!(
            "transformer: mask_rate {} must be in (0, 1]",
            tc.mask_rate
        )]));
    }
    let vocab_size = vocab.size();
    for s in corpus {
        if let Some(&t) = s.as_ref().iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Model(format!("token id {t} outside vocabulary of size {vocab_size}")));
        }
    }
    let seqs: Vec<&[u32]> = corpus.iter().map(|s| s.as_ref()).filter(|s| !s.is_empty()).collect();
    if seqs.is_empty() {
        return Err(Error::Model("empty pre-training corpus".into()));
    }
    let mut ps = ParamSet::new();
    let net = TransformerNet::build(config, vocab_size, &mut ps);
    let mut opt = Adam::new(tc.pretrain_learning_rate);
    let mut batch_rng = StreamRng::new(config.seed, STREAM_BATCHES + 100);
    let mut mask_rng = StreamRng::new(config.seed, STREAM_MASKING);
    let mut dropout = Dropout::new(config.dropout, StreamRng::new(config.seed, STREAM_DROPOUT + 100));
    let lengths: Vec<usize> = seqs.iter().map(|s| s.len() + 1).collect();
    let mut meta = TrainingMeta {
        seed: config.seed,
        n_train: seqs.len(),
        ..Default::default()
    };
    for epoch in 0..tc.pretrain_epochs {
        let plan = plan_batches(&lengths, config.batch_size, config.max_batch_tokens, Some(&mut batch_rng));
        let (mut loss_sum, mut hits, mut count) = (0.0, 0usize, 0usize);
        for rows in &plan {
            let mut batch = Batch::build(&seqs, rows, Some(CLS), false);
            let (at, targets) = mask_batch(&mut batch, vocab_size, tc.mask_rate, &mut mask_rng);
            if at.is_empty() {
                continue;
            }
            ps.zero_grad();
            let mut g = Graph::new();
            let logits = net.mlm_logits(&mut g, &ps, &batch, &at, Some(&mut dropout))?;
            hits += argmax_rows(g.value(logits).data(), vocab_size)
                .zip(&targets)
                .filter(|(p, t)| p == *t)
                .count();
            count += at.len();
            let loss = g.masked_cross_entropy(logits, &targets, &vec![true; at.len()])?;
            loss_sum += g.value(loss).item() as f64 * at.len() as f64;
            g.backward(loss)?;
            g.accumulate_into(&mut ps);
            if config.clip_norm > 0.0 {
                clip_grad_norm(&mut ps, config.clip_norm);
            }
            opt.step(&mut ps);
        }
        let loss = loss_sum / count.max(1) as f64;
        let acc = hits as f64 / count.max(1) as f64;
        log::info!("pretrain epoch {}: masked loss {loss:.4}, masked accuracy {acc:.3}", epoch + 1);
        meta.pretrain_losses.push(loss);
        meta.pretrain_accuracy.push(acc);
        meta.epochs = epoch + 1;
    }
    ps.zero_grad();
    Ok(TrainedModel {
        config: config.clone(),
        vocab_hash: vocab.hash(),
        vocab_size,
        meta,
        state: super::ModelState::Transformer { net, params: ps },
    })
}

fn argmax_rows(data: &[f32], cols: usize) -> impl Iterator<Item = usize> + '_ {
    data.chunks(cols).map(|row| {
        row.iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    })
}

/// Masked-code accuracy at the positions chosen by `select`, with every
/// selected position replaced by `[MASK]`. `select(seq, i)` sees the
/// unmodified sequence and the index of the code within it.
pub fn masked_accuracy<T: AsRef<[u32]>>(
    model: &TrainedModel,
    seqs: &[T],
    select: impl Fn(&[u32], usize) -> bool,
) -> Result<f64> {
    let super::ModelState::Transformer { net, params } = &model.state else {
        return Err(Error::Model("masked accuracy needs a transformer".into()));
    };
    let cfg = &model.config;
    let lengths: Vec<usize> = seqs.iter().map(|s| s.as_ref().len() + 1).collect();
    let (mut hits, mut count) = (0usize, 0usize);
    for rows in plan_batches(&lengths, cfg.batch_size, cfg.max_batch_tokens, None) {
        let mut batch = Batch::build(seqs, &rows, Some(CLS), false);
        let mut at = Vec::new();
        let mut targets = Vec::new();
        for (k, &r) in rows.iter().enumerate() {
            let s = seqs[r].as_ref();
            for (i, &tok) in s.iter().enumerate() {
                if select(s, i) {
                    let flat = k * batch.len + batch.pads[k] + 1 + i;
                    at.push(flat);
                    targets.push(tok as usize);
                    batch.ids[flat] = MASK as usize;
                }
            }
        }
        if at.is_empty() {
            continue;
        }
        let mut g = Graph::new();
        let logits = net.mlm_logits(&mut g, params, &batch, &at, None)?;
        hits += argmax_rows(g.value(logits).data(), net.vocab_size)
            .zip(&targets)
            .filter(|(p, t)| p == *t)
            .count();
        count += at.len();
    }
    if count == 0 {
        return Err(Error::Model("no positions selected".into()));
    }
    Ok(hits as f64 / count as f64)
}

pub(crate) fn finetune(
    config: &ModelConfig,
    vocab_size: usize,
    pretrained: Option<&TrainedModel>,
    train: &[CodeSequence],
    valid: &[CodeSequence],
    meta: &mut TrainingMeta,
) -> Result<(TransformerNet, ParamSet)> {
    let mut ps = ParamSet::new();
    let net = TransformerNet::build(config, vocab_size, &mut ps);
    if let Some(p) = pretrained {
        let super::ModelState::Transformer { params: src, .. } = &p.state else {
            return Err(Error::Model("pre-trained model is not a transformer".into()));
        };
        for param in ps.iter_mut().filter(|q| q.name.starts_with(ENCODER)) {
            let id = src
                .find(&param.name)
                .ok_or_else(|| Error::Model(format!("pre-trained encoder lacks {}", param.name)))?;
            let value = &src.get(id).value;
            if value.shape() != param.value.shape() {
                return Err(Error::Model(format!(
                    "pre-trained {} has shape {:?}, expected {:?}",
                    param.name,
                    value.shape(),
                    param.value.shape()
                )));
            }
            param.value = value.clone();
        }
    }
    for param in ps.iter_mut() {
        param.trainable = !param.name.starts_with("mlm.") && !(config.transformer.freeze_encoder && param.name.starts_with(ENCODER));
    }
    meta.degenerate = train.iter().all(|s| s.label == train[0].label);
    nn::fit(&net, &mut ps, config, train, valid, meta)?;
    Ok((net, ps))
}

