//! The five classifier families: bag-of-words logistic regression and
//! random forest, GRU and LSTM sequence models, and a transformer encoder
//! with masked-code pre-training.
//!
//! [`train`] dispatches on [`ModelConfig::kind`]. Bag-of-words models only
//! ever see a [`BowMatrix`], so they cannot depend on token order.
//! Sequence models are trained with Adam on unweighted binary
//! cross-entropy, with early stopping on validation AUC.

mod batch;
pub mod forest;
pub mod gradsuite;
pub mod layers;
pub mod logistic;
mod nn;
pub mod recurrent;
pub mod transformer;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use batch::{plan_batches, Batch};
pub use forest::{train_rf, Forest, ForestConfig};
pub use logistic::{train_lr, LogisticConfig, LogisticModel};
pub use recurrent::RecurrentNet;
pub use transformer::{pretrain_transformer, TransformerConfig, TransformerNet};

use crate::corpus::{bag_of_words, BowMatrix, CodeSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::numcore::checkpoint::{self, CheckpointHeader};
use crate::numcore::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lr,
    Rf,
    Gru,
    Lstm,
    Transformer,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Lr,
        ModelKind::Rf,
        ModelKind::Gru,
        ModelKind::Lstm,
        ModelKind::Transformer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Lr => "lr",
            ModelKind::Rf => "rf",
            ModelKind::Gru => "gru",
            ModelKind::Lstm => "lstm",
            ModelKind::Transformer => "transformer",
        }
    }

    pub fn is_sequence(self) -> bool {
        matches!(self, ModelKind::Gru | ModelKind::Lstm | ModelKind::Transformer)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(vec![format!("unknown model kind {s:?}")]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub seed: u64,
    /// Recurrent state width and transformer model width. Token embeddings
    /// use the same size.
    pub hidden_size: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Upper bound on `batch × padded length` per minibatch.
    pub max_batch_tokens: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-AUC improvement before stopping.
    pub patience: usize,
    /// Loss weight of positive examples; `None` means unweighted.
    pub positive_class_weight: Option<f64>,
    /// Feed recurrent models the most recent code first.
    pub reverse_input: bool,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub transformer: TransformerConfig,
    pub rf: ForestConfig,
    pub lr: LogisticConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Gru,
            seed: 2021,
            hidden_size: 64,
            dropout: 0.1,
            learning_rate: 1e-3,
            batch_size: 32,
            max_batch_tokens: 8192,
            max_epochs: 50,
            patience: 5,
            positive_class_weight: None,
            reverse_input: false,
            clip_norm: 1.0,
            transformer: TransformerConfig::default(),
            rf: ForestConfig::default(),
            lr: LogisticConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            ..Default::default()
        }
    }

    /// 768 hidden units; 12 layers, 12 heads and 3072-wide feed-forward
    /// blocks for the transformer.
    pub fn full_scale(kind: ModelKind) -> Self {
        let mut c = ModelConfig::new(kind);
        c.hidden_size = 768;
        c.transformer.layers = 12;
        c.transformer.heads = 12;
        c.transformer.ff_size = 3072;
        c
    }

    /// Every violated constraint, given the corpus truncation length.
    pub fn violations(&self, max_len: usize) -> Vec<String> {
        let mut v = Vec::new();
        let k = self.kind;
        if self.hidden_size == 0 {
            v.push(format!("{k}: hidden_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            v.push(format!("{k}: dropout must be in [0, 1)"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            v.push(format!("{k}: learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            v.push(format!("{k}: batch_size must be positive"));
        }
        if self.max_epochs == 0 {
            v.push(format!("{k}: max_epochs must be positive"));
        }
        if self.positive_class_weight.is_some_and(|w| w.is_nan() || w <= 0.0) {
            v.push(format!("{k}: positive_class_weight must be positive"));
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            v.push(format!("{k}: clip_norm must be non-negative"));
        }
        match k {
            ModelKind::Transformer => v.extend(self.transformer.violations(self.hidden_size, max_len)),
            ModelKind::Rf => v.extend(self.rf.violations()),
            ModelKind::Lr => v.extend(self.lr.violations()),
            ModelKind::Gru | ModelKind::Lstm => {}
        }
        v
    }

    pub fn validate(&self, max_len: usize) -> Result<()> {
        let v = self.violations(max_len);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Record of one training run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingMeta {
    pub seed: u64,
    pub n_train: usize,
    pub n_valid: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub train_losses: Vec<f64>,
    pub valid_aucs: Vec<f64>,
    pub best_valid_auc: Option<f64>,
    pub pretrained: bool,
    pub pretrain_losses: Vec<f64>,
    pub pretrain_accuracy: Vec<f64>,
    /// Training labels had a single class; the model scores the prior.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelState {
    Logistic(LogisticModel),
    Forest(Forest),
    Recurrent { net: RecurrentNet, params: ParamSet },
    Transformer { net: TransformerNet, params: ParamSet },
}

/// A trained classifier. Immutable after training; scoring is
/// deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub vocab_size: usize,
    pub meta: TrainingMeta,
    pub state: ModelState,
}

pub(crate) fn labels_of(seqs: &[CodeSequence]) -> Vec<u8> {
    seqs.iter().map(|s| s.label).collect()
}

fn check_tokens(seqs: &[CodeSequence], vocab_size: usize) -> Result<()> {
    for s in seqs {
        if let Some(&t) = s.token_ids.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Model(format!(
                "patient {}: token id {t} outside vocabulary of size {vocab_size}",
                s.patient_id
            )));
        }
    }
    Ok(())
}

/// Trains one model.
///
/// Bag-of-words models are fit on `train` and `valid` together. Sequence
/// models fit on `train` and use `valid` for early stopping. A transformer
/// starts from `pretrained` when given, otherwise from random weights.
pub fn train(
    config: &ModelConfig,
    vocab: &Vocabulary,
    train: &[CodeSequence],
    valid: &[CodeSequence],
    pretrained: Option<&TrainedModel>,
) -> Result<TrainedModel> {
    if train.is_empty() {
        return Err(Error::Model("empty training set".into()));
    }
    let vocab_size = vocab.size();
    check_tokens(train, vocab_size)?;
    check_tokens(valid, vocab_size)?;
    let mut meta = TrainingMeta {
        seed: config.seed,
        n_train: train.len(),
        n_valid: valid.len(),
        ..Default::default()
    };
    let state = match config.kind {
        ModelKind::Lr | ModelKind::Rf => {
            let all: Vec<&CodeSequence> = train.iter().chain(valid).collect();
            let x = bag_of_words(&all.iter().map(|s| s.token_ids.as_slice()).collect::<Vec<_>>(), vocab_size);
            let y: Vec<u8> = all.iter().map(|s| s.label).collect();
            if config.kind == ModelKind::Lr {
                let m = train_lr(&x, &y, &config.lr)?;
                meta.degenerate = m.degenerate;
                ModelState::Logistic(m)
            } else {
                let m = train_rf(&x, &y, &config.rf, config.seed)?;
                meta.degenerate = m.degenerate;
                ModelState::Forest(m)
            }
        }
        ModelKind::Gru | ModelKind::Lstm => {
            let (net, params) = recurrent::fit(config, vocab_size, train, valid, &mut meta)?;
            ModelState::Recurrent { net, params }
        }
        ModelKind::Transformer => {
            if let Some(p) = pretrained {
                if p.vocab_hash != vocab.hash() {
                    return Err(Error::Model("pre-trained encoder was built on a different vocabulary".into()));
                }
                meta.pretrained = true;
                meta.pretrain_losses = p.meta.pretrain_losses.clone();
                meta.pretrain_accuracy = p.meta.pretrain_accuracy.clone();
            }
            let (net, params) = transformer::finetune(config, vocab_size, pretrained, train, valid, &mut meta)?;
            ModelState::Transformer { net, params }
        }
    };
    Ok(TrainedModel {
        config: config.clone(),
        vocab_hash: vocab.hash(),
        vocab_size,
        meta,
        state,
    })
}

impl TrainedModel {
    /// Risk score in `[0, 1]` per sequence, in input order.
    pub fn score<T: AsRef<[u32]>>(&self, seqs: &[T]) -> Result<Vec<f64>> {
        for s in seqs {
            if let Some(&t) = s.as_ref().iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(Error::Model(format!(
                    "token id {t} outside the model's vocabulary of size {}",
                    self.vocab_size
                )));
            }
        }
        match &self.state {
            ModelState::Logistic(m) => Ok(m.score(&bag_of_words(seqs, self.vocab_size))),
            ModelState::Forest(m) => Ok(m.score(&bag_of_words(seqs, self.vocab_size))),
            ModelState::Recurrent { net, params } => nn::score(net, params, &self.config, seqs),
            ModelState::Transformer { net, params } => nn::score(net, params, &self.config, seqs),
        }
    }

    /// Scores a bag-of-words matrix directly; only for LR and RF.
    pub fn score_bow(&self, x: &BowMatrix) -> Result<Vec<f64>> {
        match &self.state {
            ModelState::Logistic(m) => Ok(m.score(x)),
            ModelState::Forest(m) => Ok(m.score(x)),
            _ => Err(Error::Model(format!("{} does not take bag-of-words input", self.config.kind))),
        }
    }

    /// Scores labeled sequences, checking that they were encoded with the
    /// model's vocabulary.
    pub fn score_checked(&self, seqs: &[CodeSequence], vocab: &Vocabulary) -> Result<Vec<f64>> {
        if vocab.hash() != self.vocab_hash {
            return Err(Error::Model("corpus vocabulary does not match the model".into()));
        }
        self.score(seqs)
    }

    /// Writes a checkpoint (neural models) or a JSON document (LR, RF).
    pub fn save(&self, path: &Path) -> Result<()> {
        let extra = serde_json::json!({
            "vocab_size": self.vocab_size,
            "meta": self.meta,
        });
        match &self.state {
            ModelState::Recurrent { params, .. } | ModelState::Transformer { params, .. } => {
                let header = CheckpointHeader {
                    model_kind: self.config.kind.as_str().into(),
                    hyperparameters: serde_json::to_value(&self.config)?,
                    vocab_hash: self.vocab_hash.clone(),
                    params: vec![],
                    extra,
                };
                checkpoint::save(path, &header, params)
            }
            ModelState::Logistic(_) | ModelState::Forest(_) => {
                let body = match &self.state {
                    ModelState::Logistic(m) => serde_json::to_value(m)?,
                    ModelState::Forest(m) => serde_json::to_value(m)?,
                    _ => unreachable!(),
                };
                let doc = serde_json::json!({
                    "model_kind": self.config.kind,
                    "hyperparameters": self.config,
                    "vocab_hash": self.vocab_hash,
                    "extra": extra,
                    "model": body,
                });
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                std::fs::write(path, serde_json::to_string(&doc)? + "\n").map_err(|e| Error::io(path, e))
            }
        }
    }

    pub fn load(path: &Path) -> Result<TrainedModel> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(checkpoint::MAGIC) {
            let (header, stored) = checkpoint::from_bytes(&bytes)?;
            let config: ModelConfig = serde_json::from_value(header.hyperparameters)?;
            let (vocab_size, meta) = parse_extra(&header.extra)?;
            let state = match config.kind {
                ModelKind::Gru | ModelKind::Lstm => {
                    let mut params = ParamSet::new();
                    let net = RecurrentNet::build(&config, vocab_size, &mut params);
                    checkpoint::restore_into(&mut params, &stored)?;
                    ModelState::Recurrent { net, params }
                }
                ModelKind::Transformer => {
                    let mut params = ParamSet::new();
                    let net = TransformerNet::build(&config, vocab_size, &mut params);
                    checkpoint::restore_into(&mut params, &stored)?;
                    ModelState::Transformer { net, params }
                }
                k => return Err(Error::Checkpoint(format!("{k} models are not stored as checkpoints"))),
            };
            return Ok(TrainedModel {
                config,
                vocab_hash: header.vocab_hash,
                vocab_size,
                meta,
                state,
            });
        }
        let doc: serde_json::Value = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: neither a checkpoint nor JSON: {e}", path.display())))?;
        let config: ModelConfig = serde_json::from_value(doc["hyperparameters"].clone())?;
        let (vocab_size, meta) = parse_extra(&doc["extra"])?;
        let state = match config.kind {
            ModelKind::Lr => ModelState::Logistic(serde_json::from_value(doc["model"].clone())?),
            ModelKind::Rf => ModelState::Forest(serde_json::from_value(doc["model"].clone())?),
            k => return Err(Error::Checkpoint(format!("{k} models are stored as binary checkpoints"))),
        };
        Ok(TrainedModel {
            config,
            vocab_hash: doc["vocab_hash"].as_str().unwrap_or_default().to_string(),
            vocab_size,
            meta,
            state,
        })
    }
}

fn parse_extra(extra: &serde_json::Value) -> Result<(usize, TrainingMeta)> {
    let vocab_size = extra["vocab_size"]
        .as_u64()
        .ok_or_else(|| Error::Checkpoint("missing vocab_size".into()))? as usize;
    let meta = serde_json::from_value(extra["meta"].clone())?;
    Ok((vocab_size, meta))
}
