use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;

use super::roc::{roc_auc, Descriptor, RocReport};
use crate::cohort::CohortLabel;
use crate::corpus::{
    build_vocab, encode_cohort, encode_unlabeled_pool, keyed_hash, CodeSequence, CorpusSettings, ModalitySet, Split,
    Task, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eventstore::PatientStream;
use crate::models::{self, pretrain_transformer, ModelConfig, ModelKind, TrainedModel};

/// One task's encoded cohort, divided by a fixed split, plus the
/// unlabeled pre-training pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCorpus {
    pub task: Task,
    pub modalities: ModalitySet,
    pub vocab: Vocabulary,
    pub train: Vec<CodeSequence>,
    pub validation: Vec<CodeSequence>,
    pub test: Vec<CodeSequence>,
    pub pretrain_pool: Vec<Vec<u32>>,
    pub test_hash: String,
    /// Used to carve validation patients out of size-sweep subsamples.
    pub validation_fraction: f64,
}

impl PreparedCorpus {
    /// Builds the vocabulary over every stream for `settings.modalities`,
    /// encodes cases and controls for `task`, and partitions them by `split`.
    pub fn build(
        streams: &[PatientStream],
        labels: &[CohortLabel],
        task: Task,
        settings: &CorpusSettings,
        split: &Split,
        masked: &BTreeSet<String>,
        validation_fraction: f64,
    ) -> Result<PreparedCorpus> {
        let vocab = build_vocab(streams, settings.modalities, settings.min_frequency)?;
        let sequences = encode_cohort(streams, labels, task, &vocab, settings, masked)?;
        let pool = encode_unlabeled_pool(streams, labels, &vocab, settings)
            .into_iter()
            .map(|(_, ids)| ids)
            .collect();
        PreparedCorpus::from_parts(task, settings.modalities, vocab, sequences, split, pool, validation_fraction)
    }

    /// Partitions already-encoded sequences.
    pub fn from_parts(
        task: Task,
        modalities: ModalitySet,
        vocab: Vocabulary,
        sequences: Vec<CodeSequence>,
        split: &Split,
        pretrain_pool: Vec<Vec<u32>>,
        validation_fraction: f64,
    ) -> Result<PreparedCorpus> {
        let mut by_id: HashMap<String, CodeSequence> =
            sequences.into_iter().map(|s| (s.patient_id.clone(), s)).collect();
        let mut take = |ids: &[String]| -> Result<Vec<CodeSequence>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .remove(id)
                        .ok_or_else(|| Error::Data(format!("split patient {id} has no encoded sequence")))
                })
                .collect()
        };
        let train = take(&split.train)?;
        let validation = take(&split.validation)?;
        let test = take(&split.test)?;
        if !by_id.is_empty() {
            return Err(Error::Data(format!(
                "{} encoded patients are missing from the split",
                by_id.len()
            )));
        }
        Ok(PreparedCorpus {
            task,
            modalities,
            vocab,
            train,
            validation,
            test,
            pretrain_pool,
            test_hash: split.test_hash(),
            validation_fraction,
        })
    }

    /// Labeled patients available for fitting.
    pub fn fit_size(&self) -> usize {
        self.train.len() + self.validation.len()
    }

    /// Seeded subsample of `size` fitting patients, divided into training
    /// and validation. Membership depends only on `(seed, size)`, and
    /// smaller subsamples are nested in larger ones. The full size returns
    /// the original partition.
    pub fn subsample(&self, size: usize, seed: u64) -> Result<(Vec<CodeSequence>, Vec<CodeSequence>)> {
        let total = self.fit_size();
        if size > total {
            return Err(Error::Data(format!(
                "subsample of {size} exceeds the {total} available training patients"
            )));
        }
        if size == total {
            return Ok((self.train.clone(), self.validation.clone()));
        }
        if size < 2 {
            return Err(Error::Data("subsample needs at least 2 patients".into()));
        }
        let pool: Vec<&CodeSequence> = self.train.iter().chain(&self.validation).collect();
        let mut ranked: Vec<(u64, &str)> = pool
            .iter()
            .map(|s| (keyed_hash(seed, b"subsample", &s.patient_id), s.patient_id.as_str()))
            .collect();
        ranked.sort();
        let chosen: Vec<&str> = ranked[..size].iter().map(|(_, id)| *id).collect();
        let n_val = ((self.validation_fraction * size as f64).round() as usize).clamp(1, size - 1);
        let mut by_val: Vec<(u64, &str)> = chosen
            .iter()
            .map(|id| (keyed_hash(seed, b"subsample-validation", id), *id))
            .collect();
        by_val.sort();
        let val_ids: BTreeSet<&str> = by_val[..n_val].iter().map(|(_, id)| *id).collect();
        let chosen: BTreeSet<&str> = chosen.into_iter().collect();
        let mut train = Vec::new();
        let mut valid = Vec::new();
        for s in pool {
            let id = s.patient_id.as_str();
            if val_ids.contains(id) {
                valid.push(s.clone());
            } else if chosen.contains(id) {
                train.push(s.clone());
            }
        }
        Ok((train, valid))
    }
}

/// Label used in reports for a model configuration.
pub fn model_label(config: &ModelConfig) -> String {
    if config.kind == ModelKind::Transformer && !config.transformer.pretrain {
        "transformer-scratch".into()
    } else {
        config.kind.as_str().into()
    }
}

fn with_seed(config: &ModelConfig, seed: u64) -> ModelConfig {
    ModelConfig {
        seed,
        ..config.clone()
    }
}

/// Pre-trains one encoder per (transformer config, seed) that asks for it.
/// Keys are indices into `models`.
fn pretrain_all(corpus: &PreparedCorpus, models: &[ModelConfig], seeds: &[u64]) -> Result<HashMap<(usize, u64), TrainedModel>> {
    let jobs: Vec<(usize, u64)> = models
        .iter()
        .enumerate()
        .filter(|(_, m)| m.kind == ModelKind::Transformer && m.transformer.pretrain)
        .flat_map(|(i, _)| seeds.iter().map(move |&s| (i, s)))
        .collect();
    jobs.into_par_iter()
        .map(|(i, seed)| {
            log::info!("pre-training transformer (seed {seed}) on {} sequences", corpus.pretrain_pool.len());
            let model = pretrain_transformer(&with_seed(&models[i], seed), &corpus.vocab, &corpus.pretrain_pool)?;
            Ok(((i, seed), model))
        })
        .collect()
}

/// Trains `config` under `seed` and scores the test set.
pub fn fit_and_score(
    corpus: &PreparedCorpus,
    config: &ModelConfig,
    seed: u64,
    train: &[CodeSequence],
    valid: &[CodeSequence],
    pretrained: Option<&TrainedModel>,
) -> Result<(TrainedModel, RocReport)> {
    let cfg = with_seed(config, seed);
    let model = models::train(&cfg, &corpus.vocab, train, valid, pretrained)?;
    let report = evaluate(&model, corpus, train.len() + valid.len(), &model_label(config))?;
    Ok((model, report))
}

/// Scores the frozen test set.
pub fn evaluate(model: &TrainedModel, corpus: &PreparedCorpus, train_size: usize, label: &str) -> Result<RocReport> {
    let scores = model.score_checked(&corpus.test, &corpus.vocab)?;
    let labels = models::labels_of(&corpus.test);
    let mut report = roc_auc(&scores, &labels)?;
    report.descriptor = Descriptor {
        task: corpus.task,
        model: label.to_string(),
        modalities: corpus.modalities,
        train_size,
        seed: model.config.seed,
    };
    report.test_hash = corpus.test_hash.clone();
    log::info!("{}: test AUC {:.4}", report.descriptor.id(), report.auc);
    Ok(report)
}

/// One report per (model, seed), in that order. Models train on the
/// training partition with validation-based early stopping (bag-of-words
/// models fit both partitions) and are scored on the frozen test set.
pub fn run_task(corpus: &PreparedCorpus, models: &[ModelConfig], seeds: &[u64]) -> Result<Vec<RocReport>> {
    Ok(run_task_models(corpus, models, seeds)?.into_iter().map(|(_, r)| r).collect())
}

/// [`run_task`], also returning the trained models.
pub fn run_task_models(corpus: &PreparedCorpus, models: &[ModelConfig], seeds: &[u64]) -> Result<Vec<(TrainedModel, RocReport)>> {
    let pretrained = pretrain_all(corpus, models, seeds)?;
    let cells: Vec<(usize, u64)> = (0..models.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    cells
        .into_par_iter()
        .map(|(i, seed)| {
            fit_and_score(
                corpus,
                &models[i],
                seed,
                &corpus.train,
                &corpus.validation,
                pretrained.get(&(i, seed)),
            )
        })
        .collect()
}

/// AUC against the number of labeled fitting patients. The test set and
/// the pre-training pool stay fixed; see [`PreparedCorpus::subsample`].
pub fn size_sweep(corpus: &PreparedCorpus, models: &[ModelConfig], sizes: &[usize], seeds: &[u64]) -> Result<Vec<RocReport>> {
    if let Some(&s) = sizes.iter().find(|&&s| s > corpus.fit_size()) {
        return Err(Error::Data(format!(
            "sweep size {s} exceeds the {} available training patients",
            corpus.fit_size()
        )));
    }
    let pretrained = pretrain_all(corpus, models, seeds)?;
    let cells: Vec<(usize, usize, u64)> = sizes
        .iter()
        .flat_map(|&n| (0..models.len()).flat_map(move |i| seeds.iter().map(move |&s| (n, i, s))))
        .collect();
    cells
        .into_par_iter()
        .map(|(n, i, seed)| {
            let (train, valid) = corpus.subsample(n, seed)?;
            fit_and_score(corpus, &models[i], seed, &train, &valid, pretrained.get(&(i, seed))).map(|(_, r)| r)
        })
        .collect()
}

/// Reruns [`run_task`] for each modality subset with a vocabulary rebuilt
/// from that subset alone. The split, and hence the test set, is shared.
#[allow(clippy::too_many_arguments)]
pub fn ablation(
    streams: &[PatientStream],
    labels: &[CohortLabel],
    task: Task,
    settings: &CorpusSettings,
    split: &Split,
    masked: &BTreeSet<String>,
    validation_fraction: f64,
    models: &[ModelConfig],
    subsets: &[ModalitySet],
    seeds: &[u64],
) -> Result<Vec<RocReport>> {
    let mut out = Vec::new();
    for &subset in subsets {
        let s = CorpusSettings {
            modalities: subset,
            ..settings.clone()
        };
        let corpus = PreparedCorpus::build(streams, labels, task, &s, split, masked, validation_fraction)?;
        log::info!("ablation {subset}: vocabulary of {} ids", corpus.vocab.size());
        out.extend(run_task(&corpus, models, seeds)?);
    }
    Ok(out)
}

/// Mean AUC per descriptor with the seed removed, in first-seen order.
pub fn mean_auc(reports: &[RocReport]) -> Vec<(Descriptor, f64, Vec<f64>)> {
    let mut groups: Vec<(Descriptor, Vec<f64>)> = Vec::new();
    for r in reports {
        let key = Descriptor {
            seed: 0,
            ..r.descriptor.clone()
        };
        match groups.iter_mut().find(|(d, _)| *d == key) {
            Some((_, v)) => v.push(r.auc),
            None => groups.push((key, vec![r.auc])),
        }
    }
    groups
        .into_iter()
        .map(|(d, v)| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            (d, mean, v)
        })
        .collect()
}
