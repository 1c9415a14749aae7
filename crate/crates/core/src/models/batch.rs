use crate::corpus::PAD;
use crate::rng::StreamRng;

/// Left-padded minibatch. Row `b` holds `pads[b]` padding positions
/// followed by the (optionally prefixed) sequence, so the last column is
/// always the most recent code.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Dataset indices of the rows.
    pub rows: Vec<usize>,
    pub len: usize,
    /// `[rows, len]` token ids, row-major.
    pub ids: Vec<usize>,
    /// `[rows, len]`, false at padding.
    pub valid: Vec<bool>,
    pub pads: Vec<usize>,
}

impl Batch {
    /// Builds a batch from `seqs[rows]`. `prefix` (e.g. `[CLS]`) is put in
    /// front of every sequence; `reverse` flips each sequence first.
    pub fn build<T: AsRef<[u32]>>(seqs: &[T], rows: &[usize], prefix: Option<u32>, reverse: bool) -> Batch {
        let extra = usize::from(prefix.is_some());
        let len = rows.iter().map(|&r| seqs[r].as_ref().len() + extra).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * len);
        let mut valid = Vec::with_capacity(rows.len() * len);
        let mut pads = Vec::with_capacity(rows.len());
        for &r in rows {
            let s = seqs[r].as_ref();
            let pad = len - s.len() - extra;
            pads.push(pad);
            ids.extend(std::iter::repeat(PAD as usize).take(pad));
            valid.extend(std::iter::repeat(false).take(pad));
            if let Some(p) = prefix {
                ids.push(p as usize);
                valid.push(true);
            }
            if reverse {
                ids.extend(s.iter().rev().map(|&t| t as usize));
            } else {
                ids.extend(s.iter().map(|&t| t as usize));
            }
            valid.extend(std::iter::repeat(true).take(s.len()));
        }
        Batch {
            rows: rows.to_vec(),
            len,
            ids,
            valid,
            pads,
        }
    }

    pub fn size(&self) -> usize {
        self.rows.len()
    }

    /// Token ids in time-major order: `[len, rows]`.
    pub fn time_major_ids(&self) -> Vec<usize> {
        let b = self.size();
        let mut out = vec![0; self.ids.len()];
        for r in 0..b {
            for t in 0..self.len {
                out[t * b + r] = self.ids[r * self.len + t];
            }
        }
        out
    }

    /// Which rows hold a real token at step `t`.
    pub fn valid_at(&self, t: usize) -> Vec<bool> {
        (0..self.size()).map(|r| self.valid[r * self.len + t]).collect()
    }
}

/// Groups sequence indices into minibatches of similar length, capped at
/// `batch_size` rows and `max_tokens` padded positions (a single longer
/// sequence still forms its own batch).
///
/// Without an rng the plan is fully sorted by length, for scoring. With one,
/// indices are shuffled, sorted by length within pools of 16 batches, and
/// the resulting batches are shuffled.
pub fn plan_batches(lengths: &[usize], batch_size: usize, max_tokens: usize, rng: Option<&mut StreamRng>) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    let chunk = |sorted: &[usize], out: &mut Vec<Vec<usize>>| {
        let mut cur: Vec<usize> = Vec::new();
        let mut longest = 0;
        for &i in sorted {
            let l = lengths[i].max(1);
            let widest = longest.max(l);
            if !cur.is_empty() && (cur.len() == batch_size || (cur.len() + 1) * widest > max_tokens) {
                out.push(std::mem::take(&mut cur));
                longest = 0;
            }
            longest = longest.max(l);
            cur.push(i);
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    };
    let mut batches = Vec::new();
    match rng {
        None => {
            order.sort_by_key(|&i| (lengths[i], i));
            chunk(&order, &mut batches);
        }
        Some(rng) => {
            rng.shuffle(&mut order);
            for pool in order.chunks(batch_size * 16) {
                let mut pool = pool.to_vec();
                pool.sort_by_key(|&i| lengths[i]);
                chunk(&pool, &mut batches);
            }
            rng.shuffle(&mut batches);
        }
    }
    batches
}
