//! L2-regularized logistic regression on standardized bag-of-words counts.
//!
//! Minimizes
//!
//! ```text
//! (1/n) Σᵢ [log(1 + exp(zᵢ)) − yᵢ zᵢ] + (λ/2)‖w‖²,   zᵢ = b + Σⱼ wⱼ (xᵢⱼ − μⱼ)/σⱼ
//! ```
//!
//! by gradient descent with Armijo backtracking, stopping when the largest
//! gradient component falls below the tolerance. The intercept is not
//! penalized and starts at the log-odds of the training prior.

use serde::{Deserialize, Serialize};

use crate::corpus::BowMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticConfig {
    pub l2: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            l2: 1e-3,
            max_iterations: 1000,
            tolerance: 1e-5,
        }
    }
}

impl LogisticConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.l2.is_nan() || self.l2 < 0.0 {
            v.push("lr: l2 must be non-negative".into());
        }
        if self.max_iterations == 0 {
            v.push("lr: max_iterations must be positive".into());
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            v.push("lr: tolerance must be positive".into());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub prior: f64,
    pub degenerate: bool,
    pub iterations: usize,
    pub converged: bool,
}

/// Nonzero entries of each row.
struct Sparse {
    rows: Vec<Vec<(usize, f64)>>,
}

impl Sparse {
    fn new(x: &BowMatrix) -> Sparse {
        Sparse {
            rows: (0..x.rows)
                .map(|i| {
                    x.row(i)
                        .iter()
                        .enumerate()
                        .filter(|(_, &v)| v != 0.0)
                        .map(|(j, &v)| (j, v as f64))
                        .collect()
                })
                .collect(),
        }
    }
}

fn log1p_exp(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogisticModel {
    /// Effective coefficients on raw counts: `(w / σ, b − Σ w μ / σ)`.
    fn raw(&self) -> (Vec<f64>, f64) {
        let coef: Vec<f64> = self.weights.iter().zip(&self.scale).map(|(w, s)| w / s).collect();
        let offset = self.bias - coef.iter().zip(&self.mean).map(|(c, m)| c * m).sum::<f64>();
        (coef, offset)
    }

    pub fn score(&self, x: &BowMatrix) -> Vec<f64> {
        if self.degenerate {
            return vec![self.prior; x.rows];
        }
        let (coef, offset) = self.raw();
        (0..x.rows)
            .map(|i| {
                let z: f64 = offset
                    + x.row(i)
                        .iter()
                        .zip(&coef)
                        .filter(|(&v, _)| v != 0.0)
                        .map(|(&v, c)| v as f64 * c)
                        .sum::<f64>();
                sigmoid(z)
            })
            .collect()
    }
}

pub fn train_lr(x: &BowMatrix, labels: &[u8], config: &LogisticConfig) -> Result<LogisticModel> {
    if x.rows != labels.len() {
        return Err(Error::Data(format!("{} rows but {} labels", x.rows, labels.len())));
    }
    if x.rows == 0 {
        return Err(Error::Model("empty training set".into()));
    }
    let n = x.rows as f64;
    let d = x.cols;
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l.min(1))).collect();
    let prior = y.iter().sum::<f64>() / n;

    let mut mean = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for i in 0..x.rows {
        for (j, &v) in x.row(i).iter().enumerate() {
            mean[j] += v as f64;
            sq[j] += (v as f64) * (v as f64);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let scale: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let var = (s / n - m * m).max(0.0);
            if var > 1e-12 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();

    let mut model = LogisticModel {
        mean,
        scale,
        weights: vec![0.0; d],
        bias: 0.0,
        prior,
        degenerate: prior == 0.0 || prior == 1.0,
        iterations: 0,
        converged: false,
    };
    if model.degenerate {
        log::warn!("logistic regression: single-class training labels; scoring the prior {prior}");
        model.converged = true;
        return Ok(model);
    }
    model.bias = (prior / (1.0 - prior)).ln();

    let sparse = Sparse::new(x);
    let lambda = config.l2;
    // Objective and gradient in standardized coordinates, computed via the
    // raw-count form so only nonzero entries are visited.
    let eval = |w: &[f64], b: f64, grad: Option<(&mut [f64], &mut f64)>| -> f64 {
        let coef: Vec<f64> = w.iter().zip(&model.scale).map(|(w, s)| w / s).collect();
        let offset = b - coef.iter().zip(&model.mean).map(|(c, m)| c * m).sum::<f64>();
        let mut loss = 0.0;
        let mut resid = Vec::with_capacity(sparse.rows.len());
        for (row, &yi) in sparse.rows.iter().zip(&y) {
            let z = offset + row.iter().map(|&(j, v)| coef[j] * v).sum::<f64>();
            loss += log1p_exp(z) - yi * z;
            resid.push(sigmoid(z) - yi);
        }
        let reg = 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
        if let Some((gw, gb)) = grad {
            // ∂/∂wⱼ = (1/n) Σᵢ rᵢ (xᵢⱼ − μⱼ)/σⱼ + λ wⱼ
            let mut raw = vec![0.0; w.len()];
            for (row, &r) in sparse.rows.iter().zip(&resid) {
                for &(j, v) in row {
                    raw[j] += r * v;
                }
            }
            let rsum: f64 = resid.iter().sum();
            for j in 0..w.len() {
                gw[j] = (raw[j] - rsum * model.mean[j]) / model.scale[j] / n + lambda * w[j];
            }
            *gb = rsum / n;
        }
        loss / n + reg
    };

    let mut w = model.weights.clone();
    let mut b = model.bias;
    let mut gw = vec![0.0; d];
    let mut gb = 0.0;
    let mut f = eval(&w, b, Some((&mut gw, &mut gb)));
    let mut step = 1.0;
    for it in 0..config.max_iterations {
        let gmax = gw.iter().fold(gb.abs(), |m, g| m.max(g.abs()));
        model.iterations = it;
        if gmax < config.tolerance {
            model.converged = true;
            break;
        }
        let gsq: f64 = gw.iter().map(|g| g * g).sum::<f64>() + gb * gb;
        step *= 2.0;
        loop {
            let w2: Vec<f64> = w.iter().zip(&gw).map(|(w, g)| w - step * g).collect();
            let b2 = b - step * gb;
            let f2 = eval(&w2, b2, None);
            if f2 <= f - 0.5 * step * gsq || step < 1e-12 {
                w = w2;
                b = b2;
                break;
            }
            step *= 0.5;
        }
        f = eval(&w, b, Some((&mut gw, &mut gb)));
    }
    model.weights = w;
    model.bias = b;
    if !model.converged {
        log::debug!("logistic regression stopped after {} iterations", config.max_iterations);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_toy_set_is_fit_exactly() {
        let rows = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0], vec![0.0, 3.0]];
        let x = BowMatrix::from_rows(rows).unwrap();
        let y = [1, 1, 0, 0];
        let m = train_lr(&x, &y, &LogisticConfig::default()).unwrap();
        let s = m.score(&x);
        let acc = s.iter().zip(y).filter(|(s, y)| (**s > 0.5) == (*y == 1)).count();
        assert_eq!(acc, 4);
    }

    #[test]
    fn zero_features_score_the_prior() {
        let x = BowMatrix::from_rows(vec![vec![0.0; 3]; 8]).unwrap();
        let y = [1, 0, 0, 0, 1, 0, 0, 0];
        let m = train_lr(&x, &y, &LogisticConfig::default()).unwrap();
        for s in m.score(&x) {
            assert!((s - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn single_class_is_flagged() {
        let x = BowMatrix::from_rows(vec![vec![1.0], vec![2.0]]).unwrap();
        let m = train_lr(&x, &[0, 0], &LogisticConfig::default()).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.score(&x), [0.0, 0.0]);
    }
}
