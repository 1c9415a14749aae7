//! ROC/AUC and the three experiments: detection and prediction runs, the
//! training-size sweep, and the modality ablation.

mod experiment;
pub mod report;
mod roc;

pub use experiment::{
    ablation, evaluate, fit_and_score, mean_auc, model_label, run_task, run_task_models, size_sweep, PreparedCorpus,
};
pub use report::{write_report, ReportFiles};
pub use roc::{auc, roc_auc, trapezoid, Descriptor, RocReport};
