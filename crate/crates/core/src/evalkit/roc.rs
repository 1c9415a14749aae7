use serde::{Deserialize, Serialize};

use crate::corpus::{ModalitySet, Task};
use crate::error::{Error, Result};

/// What a ROC curve was measured on.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Descriptor {
    pub task: Task,
    /// Model kind, with a `-scratch` suffix for a transformer trained
    /// without pre-training.
    pub model: String,
    pub modalities: ModalitySet,
    /// Labeled patients used for fitting (training plus validation).
    pub train_size: usize,
    pub seed: u64,
}

impl Descriptor {
    /// File-name-safe identifier.
    pub fn id(&self) -> String {
        format!(
            "{}_{}_{}_n{}_s{}",
            self.task,
            self.model,
            self.modalities.to_string().replace('+', "-"),
            self.train_size,
            self.seed
        )
    }
}

impl Default for Descriptor {
    fn default() -> Self {
        Descriptor {
            task: Task::Detection,
            model: String::new(),
            modalities: ModalitySet::ALL,
            train_size: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    pub descriptor: Descriptor,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Hash of the test-set membership.
    #[serde(default)]
    pub test_hash: String,
}

/// ROC curve and AUC.
///
/// Thresholds sweep the distinct scores from high to low; all patients
/// sharing a score enter in one step, so ties contribute half credit,
/// exactly as in the Mann–Whitney statistic. The area is the trapezoid
/// rule over the points, accumulated in integers and divided once.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocReport> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data(format!(
            "ROC needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += u128::from(fp - fp0) * u128::from(tp + tp0);
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    let auc = twice_area as f64 / (2.0 * n_pos as f64 * n_neg as f64);
    Ok(RocReport {
        descriptor: Descriptor::default(),
        points,
        auc,
        n_pos,
        n_neg,
        test_hash: String::new(),
    })
}

/// AUC, or `None` when either class is missing.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    roc_auc(scores, labels).ok().map(|r| r.auc)
}

/// Trapezoidal area under stored ROC points.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}
