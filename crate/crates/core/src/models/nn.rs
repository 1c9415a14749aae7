//! Minibatch training and scoring shared by the sequence models.

use super::batch::{plan_batches, Batch};
use super::layers::Dropout;
use super::{ModelConfig, TrainingMeta};
use crate::corpus::CodeSequence;
use crate::error::Result;
use crate::evalkit::auc;
use crate::numcore::{clip_grad_norm, Adam, Graph, ParamSet, Scalar, Var};
use crate::rng::StreamRng;

/// Random stream ids under the model seed.
pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_BATCHES: u64 = 2;
pub(crate) const STREAM_DROPOUT: u64 = 3;
pub(crate) const STREAM_MASKING: u64 = 4;

pub(crate) trait Network {
    /// Token placed in front of every sequence.
    fn prefix(&self) -> Option<u32>;
    fn reverse(&self) -> bool;
    /// One raw score per batch row, shape `[rows, 1]`.
    fn logits<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamSet<S>, batch: &Batch, drop: Option<&mut Dropout>) -> Result<Var>;
}

fn lengths<T: AsRef<[u32]>, N: Network>(net: &N, seqs: &[T]) -> Vec<usize> {
    let extra = usize::from(net.prefix().is_some());
    seqs.iter().map(|s| s.as_ref().len() + extra).collect()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn score<N: Network, T: AsRef<[u32]>>(net: &N, ps: &ParamSet, config: &ModelConfig, seqs: &[T]) -> Result<Vec<f64>> {
    let plan = plan_batches(&lengths(net, seqs), config.batch_size, config.max_batch_tokens, None);
    let mut out = vec![0.0; seqs.len()];
    for rows in plan {
        let batch = Batch::build(seqs, &rows, net.prefix(), net.reverse());
        let mut g = Graph::new();
        let z = net.logits(&mut g, ps, &batch, None)?;
        for (&r, &v) in rows.iter().zip(g.value(z).data()) {
            out[r] = sigmoid(v as f64);
        }
    }
    Ok(out)
}

/// Adam on binary cross-entropy with early stopping on validation AUC.
/// The parameters of the best epoch are left in `ps`. If the validation set
/// lacks one of the classes, training loss is monitored instead.
pub(crate) fn fit<N: Network>(
    net: &N,
    ps: &mut ParamSet,
    config: &ModelConfig,
    train: &[CodeSequence],
    valid: &[CodeSequence],
    meta: &mut TrainingMeta,
) -> Result<()> {
    let mut opt = Adam::new(config.learning_rate);
    let mut batch_rng = StreamRng::new(config.seed, STREAM_BATCHES);
    let mut dropout = Dropout::new(config.dropout, StreamRng::new(config.seed, STREAM_DROPOUT));
    let train_lengths = lengths(net, train);
    let valid_labels = super::labels_of(valid);
    let pos_weight = config.positive_class_weight.unwrap_or(1.0) as f32;

    let mut best: Option<(f64, ParamSet)> = None;
    let mut stale = 0;
    for epoch in 0..config.max_epochs {
        let plan = plan_batches(&train_lengths, config.batch_size, config.max_batch_tokens, Some(&mut batch_rng));
        let mut total = 0.0;
        for rows in &plan {
            let batch = Batch::build(train, rows, net.prefix(), net.reverse());
            let targets: Vec<f32> = rows.iter().map(|&r| f32::from(train[r].label)).collect();
            let weights: Option<Vec<f32>> = config
                .positive_class_weight
                .map(|_| targets.iter().map(|&y| if y > 0.5 { pos_weight } else { 1.0 }).collect());
            ps.zero_grad();
            let mut g = Graph::new();
            let z = net.logits(&mut g, ps, &batch, Some(&mut dropout))?;
            let loss = g.bce_with_logits(z, &targets, weights.as_deref())?;
            total += g.value(loss).item() as f64 * rows.len() as f64;
            g.backward(loss)?;
            g.accumulate_into(ps);
            if config.clip_norm > 0.0 {
                clip_grad_norm(ps, config.clip_norm);
            }
            opt.step(ps);
        }
        let train_loss = total / train.len() as f64;
        meta.train_losses.push(train_loss);
        meta.epochs = epoch + 1;

        let monitor = match auc(&score(net, ps, config, valid)?, &valid_labels) {
            Some(a) => {
                meta.valid_aucs.push(a);
                a
            }
            None => -train_loss,
        };
        log::debug!(
            "{} epoch {}: train loss {train_loss:.4}, monitor {monitor:.4}",
            config.kind,
            epoch + 1
        );
        if best.as_ref().is_none_or(|(b, _)| monitor > *b) {
            best = Some((monitor, ps.clone()));
            meta.best_epoch = epoch + 1;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    if let Some((value, params)) = best {
        *ps = params;
        if !meta.valid_aucs.is_empty() {
            meta.best_valid_auc = Some(value);
        }
    }
    // Leave the parameters as a loaded checkpoint would have them.
    ps.zero_grad();
    ps.set_trainable(true);
    Ok(())
}
