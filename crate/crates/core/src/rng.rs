//! Frozen random streams for data generation.
//!
//! Every draw goes through ChaCha8 (`rand_chacha`), whose output is fixed by
//! seed and stream number on every platform. Conversions to floats and
//! bounded integers are done here with integer arithmetic so they do not
//! depend on `rand`'s distribution code, and discrete distributions are
//! sampled from cumulative tables built with `+ - * /` only.
//!
//! * `uniform()` = `(next_u64() >> 11) * 2^-53`
//! * `below(n)` = Lemire's widening-multiply method with rejection.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone)]
pub struct StreamRng {
    inner: ChaCha8Rng,
}

impl StreamRng {
    /// Substream `stream` of the generator keyed by `seed`.
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        StreamRng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Uniform integer in [lo, hi].
    /// Fisher–Yates shuffle driven by [`StreamRng::below`].
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    pub fn between(&mut self, lo: i64, hi: i64) -> i64 {
        assert!(lo <= hi);
        lo + self.below((hi - lo) as u64 + 1) as i64
    }
}

/// A discrete distribution over `offset..offset + weights.len()` sampled by
/// binary search on its cumulative table.
#[derive(Debug, Clone)]
pub struct Table {
    offset: usize,
    cumulative: Vec<f64>,
}

impl Table {
    pub fn from_weights(offset: usize, weights: &[f64]) -> Self {
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        Table { offset, cumulative }
    }

    pub fn sample(&self, rng: &mut StreamRng) -> usize {
        let u = rng.uniform();
        let idx = self.cumulative.partition_point(|&c| c <= u);
        self.offset + idx.min(self.cumulative.len() - 1)
    }

    pub fn mean(&self) -> f64 {
        let mut prev = 0.0;
        let mut mean = 0.0;
        for (i, &c) in self.cumulative.iter().enumerate() {
            mean += (self.offset + i) as f64 * (c - prev);
            prev = c;
        }
        mean
    }

    /// Negative binomial with the given mean and shape, truncated to
    /// `[lo, hi]`. The pmf is built by the ratio recurrence
    /// `p(k+1)/p(k) = (k + shape)/(k + 1) * q`, `q = mean / (mean + shape)`.
    pub fn negative_binomial(mean: f64, shape: f64, lo: usize, hi: usize) -> Self {
        let q = mean / (mean + shape);
        let mut weights = Vec::with_capacity(hi - lo + 1);
        let mut p = 1.0f64;
        for k in 0..=hi {
            if k >= lo {
                weights.push(p);
            }
            p *= (k as f64 + shape) / (k as f64 + 1.0) * q;
        }
        Table::from_weights(lo, &weights)
    }

    /// Poisson(`lambda`) shifted by `lo`, truncated to `[lo, hi]`.
    pub fn shifted_poisson(lambda: f64, lo: usize, hi: usize) -> Self {
        let mut weights = Vec::with_capacity(hi - lo + 1);
        let mut p = 1.0f64;
        for k in 0..=(hi - lo) {
            weights.push(p);
            p *= lambda / (k as f64 + 1.0);
        }
        Table::from_weights(lo, &weights)
    }

    /// Zipf-like weights `1 / (rank + 1)` over `n` items.
    pub fn zipf(n: usize) -> Self {
        let weights: Vec<f64> = (0..n).map(|k| 1.0 / (k as f64 + 1.0)).collect();
        Table::from_weights(0, &weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map({
            let mut r = StreamRng::new(7, 3);
            move |_| r.next_u64()
        }).collect();
        let mut r = StreamRng::new(7, 3);
        assert_eq!(a, (0..4).map(|_| r.next_u64()).collect::<Vec<_>>());
        let mut other = StreamRng::new(7, 4);
        assert_ne!(a[0], other.next_u64());
    }

    #[test]
    fn below_is_in_range_and_covers() {
        let mut r = StreamRng::new(1, 0);
        let mut seen = [0usize; 7];
        for _ in 0..7000 {
            seen[r.below(7) as usize] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800));
    }

    #[test]
    fn table_means() {
        let t = Table::shifted_poisson(1.7, 1, 61);
        assert!((t.mean() - 2.7).abs() < 1e-9);
        let nb = Table::negative_binomial(58.3, 0.5, 0, 20_000);
        assert!((nb.mean() - 58.3).abs() < 1e-6);
        let mut r = StreamRng::new(5, 0);
        let draws: f64 = (0..20_000).map(|_| t.sample(&mut r) as f64).sum::<f64>() / 20_000.0;
        assert!((draws - 2.7).abs() < 0.05);
    }
}
