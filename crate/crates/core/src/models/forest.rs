//! Random forest of CART trees grown on bootstrap samples with the Gini
//! criterion. Each split considers `⌊√features⌋` features drawn without
//! replacement; a row goes left when `x[feature] <= threshold`. The score
//! is the mean over trees of the positive fraction in the reached leaf.
//!
//! Trees are stored as parallel arrays; `feature[i] < 0` marks a leaf.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::BowMatrix;
use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows trees until leaves are pure or too small.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Candidate features per split; `None` means `⌊√features⌋`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 1,
            max_features: None,
            bootstrap: true,
        }
    }
}

impl ForestConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_trees == 0 {
            v.push("rf: n_trees must be positive".into());
        }
        if self.min_samples_leaf == 0 {
            v.push("rf: min_samples_leaf must be positive".into());
        }
        if self.max_features == Some(0) {
            v.push("rf: max_features must be positive".into());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f32>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    /// Positive fraction of the training rows reaching each node.
    pub value: Vec<f64>,
}

impl Tree {
    pub fn predict(&self, row: &[f32]) -> f64 {
        let mut i = 0;
        while self.feature[i] >= 0 {
            i = if row[self.feature[i] as usize] <= self.threshold[i] {
                self.left[i]
            } else {
                self.right[i]
            } as usize;
        }
        self.value[i]
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            if t.feature[i] < 0 {
                0
            } else {
                1 + go(t, t.left[i] as usize).max(go(t, t.right[i] as usize))
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub n_features: usize,
    pub prior: f64,
    pub degenerate: bool,
}

impl Forest {
    pub fn score(&self, x: &BowMatrix) -> Vec<f64> {
        if self.degenerate {
            return vec![self.prior; x.rows];
        }
        (0..x.rows)
            .map(|i| {
                let row = x.row(i);
                self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
            })
            .collect()
    }
}

struct Grower<'a> {
    x: &'a BowMatrix,
    y: &'a [u8],
    config: &'a ForestConfig,
    mtry: usize,
    rng: StreamRng,
    tree: Tree,
}

fn gini_sum(pos: f64, n: f64) -> f64 {
    // n · Gini = n · (1 − p² − (1−p)²) = 2·pos·(n − pos)/n
    if n == 0.0 {
        0.0
    } else {
        2.0 * pos * (n - pos) / n
    }
}

impl Grower<'_> {
    fn push_leaf(&mut self, value: f64) -> usize {
        self.tree.feature.push(-1);
        self.tree.threshold.push(0.0);
        self.tree.left.push(0);
        self.tree.right.push(0);
        self.tree.value.push(value);
        self.tree.feature.len() - 1
    }

    /// Best `(feature, threshold, impurity)` over the sampled features.
    fn best_split(&mut self, rows: &[usize]) -> Option<(usize, f32, f64)> {
        let d = self.x.cols;
        let min_leaf = self.config.min_samples_leaf;
        let mut feats: Vec<usize> = (0..d).collect();
        let mut best: Option<(usize, f32, f64)> = None;
        let total_pos = rows.iter().filter(|&&r| self.y[r] == 1).count() as f64;
        let n = rows.len() as f64;
        let parent = gini_sum(total_pos, n);
        let mut pairs: Vec<(f32, u8)> = Vec::with_capacity(rows.len());
        for k in 0..self.mtry.min(d) {
            let j = k + self.rng.below((d - k) as u64) as usize;
            feats.swap(k, j);
            let f = feats[k];
            pairs.clear();
            pairs.extend(rows.iter().map(|&r| (self.x.get(r, f), self.y[r])));
            let (lo, hi) = pairs
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &(v, _)| (lo.min(v), hi.max(v)));
            if lo == hi {
                continue;
            }
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_pos = 0.0;
            for i in 0..pairs.len() - 1 {
                left_pos += f64::from(pairs[i].1);
                if pairs[i].0 == pairs[i + 1].0 {
                    continue;
                }
                let nl = (i + 1) as f64;
                if i + 1 < min_leaf || pairs.len() - i - 1 < min_leaf {
                    continue;
                }
                let imp = gini_sum(left_pos, nl) + gini_sum(total_pos - left_pos, n - nl);
                if imp < parent - 1e-12 && best.is_none_or(|(_, _, b)| imp < b) {
                    let thr = pairs[i].0 + (pairs[i + 1].0 - pairs[i].0) / 2.0;
                    best = Some((f, thr, imp));
                }
            }
        }
        best
    }

    fn grow(&mut self, rows: &[usize], depth: usize) -> usize {
        let pos = rows.iter().filter(|&&r| self.y[r] == 1).count();
        let value = pos as f64 / rows.len() as f64;
        let pure = pos == 0 || pos == rows.len();
        let too_deep = self.config.max_depth.is_some_and(|m| depth >= m);
        if pure || too_deep || rows.len() < 2 * self.config.min_samples_leaf {
            return self.push_leaf(value);
        }
        let Some((f, thr, _)) = self.best_split(rows) else {
            return self.push_leaf(value);
        };
        let node = self.push_leaf(value);
        self.tree.feature[node] = f as i32;
        self.tree.threshold[node] = thr;
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x.get(i, f) <= thr);
        let li = self.grow(&l, depth + 1);
        let ri = self.grow(&r, depth + 1);
        self.tree.left[node] = li as u32;
        self.tree.right[node] = ri as u32;
        node
    }
}

pub fn train_rf(x: &BowMatrix, labels: &[u8], config: &ForestConfig, seed: u64) -> Result<Forest> {
    if x.rows != labels.len() {
        return Err(Error::Data(format!("{} rows but {} labels", x.rows, labels.len())));
    }
    if x.rows == 0 {
        return Err(Error::Model("empty training set".into()));
    }
    let y: Vec<u8> = labels.iter().map(|&l| l.min(1)).collect();
    let prior = y.iter().map(|&v| f64::from(v)).sum::<f64>() / y.len() as f64;
    let degenerate = prior == 0.0 || prior == 1.0;
    if degenerate {
        log::warn!("random forest: single-class training labels; scoring the prior {prior}");
        return Ok(Forest {
            trees: vec![],
            n_features: x.cols,
            prior,
            degenerate,
        });
    }
    let mtry = config
        .max_features
        .unwrap_or_else(|| ((x.cols as f64).sqrt().floor() as usize).max(1));
    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = StreamRng::new(seed, 1000 + t as u64);
            let rows: Vec<usize> = if config.bootstrap {
                (0..x.rows).map(|_| rng.below(x.rows as u64) as usize).collect()
            } else {
                (0..x.rows).collect()
            };
            let mut g = Grower {
                x,
                y: &y,
                config,
                mtry,
                rng,
                tree: Tree {
                    feature: vec![],
                    threshold: vec![],
                    left: vec![],
                    right: vec![],
                    value: vec![],
                },
            };
            g.grow(&rows, 0);
            g.tree
        })
        .collect();
    Ok(Forest {
        trees,
        n_features: x.cols,
        prior,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_a_single_threshold() {
        let rows: Vec<Vec<f32>> = (0..10).map(|i| vec![i as f32]).collect();
        let y: Vec<u8> = (0..10).map(|i| u8::from(i >= 6)).collect();
        let x = BowMatrix::from_rows(rows).unwrap();
        let cfg = ForestConfig {
            n_trees: 1,
            max_depth: Some(1),
            bootstrap: false,
            ..Default::default()
        };
        let f = train_rf(&x, &y, &cfg, 7).unwrap();
        let t = &f.trees[0];
        assert_eq!(t.feature[0], 0);
        assert_eq!(t.threshold[0], 5.5);
        assert_eq!(t.depth(), 1);
        assert_eq!(f.score(&x), y.iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let rows: Vec<Vec<f32>> = (0..60).map(|i| vec![(i % 7) as f32, (i % 5) as f32, (i % 3) as f32]).collect();
        let y: Vec<u8> = (0..60).map(|i| u8::from(i % 7 > 3 || i % 5 == 0)).collect();
        let x = BowMatrix::from_rows(rows).unwrap();
        let cfg = ForestConfig {
            n_trees: 10,
            ..Default::default()
        };
        let a = train_rf(&x, &y, &cfg, 3).unwrap();
        let b = train_rf(&x, &y, &cfg, 3).unwrap();
        assert_eq!(a, b);
        let doubled = x.select(&(0..60).flat_map(|i| [i, i]).collect::<Vec<_>>());
        let s = a.score(&doubled);
        assert!(s.chunks(2).all(|p| p[0] == p[1]));
    }
}
