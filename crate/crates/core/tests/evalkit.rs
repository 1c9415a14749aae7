use std::collections::BTreeSet;

use ehrseq::cohort::annotate_all;
use ehrseq::corpus::{split, CorpusSettings, ModalitySet, SplitSpec, Task};
use ehrseq::evalkit::{
    ablation, mean_auc, roc_auc, run_task, size_sweep, trapezoid, write_report, PreparedCorpus, RocReport,
};
use ehrseq::models::{ModelConfig, ModelKind};
use ehrseq::syngen::{generate, GenConfig};
use proptest::prelude::*;

/// Pairwise concordance with half credit for ties.
fn brute_force(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..200).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..20).prop_map(|v| f64::from(v) / 20.0), n),
            prop::collection::vec(0u8..2, n),
        )
            .prop_filter("both classes", |(_, y)| y.contains(&0) && y.contains(&1))
    })
}

proptest! {
    #[test]
    fn auc_equals_pairwise_concordance((s, y) in scored()) {
        let r = roc_auc(&s, &y).unwrap();
        prop_assert!((r.auc - brute_force(&s, &y)).abs() <= 1e-9);
        prop_assert!((trapezoid(&r.points) - r.auc).abs() <= 1e-9);
        prop_assert_eq!(r.n_pos + r.n_neg, s.len());
    }

    #[test]
    fn auc_is_invariant_to_increasing_transforms((s, y) in scored()) {
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        prop_assert_eq!(roc_auc(&s, &y).unwrap().auc, roc_auc(&t, &y).unwrap().auc);
        let flipped: Vec<f64> = s.iter().map(|v| -v).collect();
        let a = roc_auc(&s, &y).unwrap().auc + roc_auc(&flipped, &y).unwrap().auc;
        prop_assert!((a - 1.0).abs() < 1e-12);
    }

    #[test]
    fn roc_points_are_monotone((s, y) in scored()) {
        let r = roc_auc(&s, &y).unwrap();
        prop_assert!(r.points.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
    }
}

#[test]
fn nan_scores_and_length_mismatches_are_rejected() {
    assert!(roc_auc(&[0.1, f64::NAN], &[0, 1]).is_err());
    assert!(roc_auc(&[0.1, 0.2], &[0]).is_err());
}

struct Cohort {
    streams: Vec<ehrseq::eventstore::PatientStream>,
    labels: Vec<ehrseq::cohort::CohortLabel>,
    split: ehrseq::corpus::Split,
    settings: CorpusSettings,
}

fn cohort() -> Cohort {
    let cfg = GenConfig {
        n_patients: 500,
        mean_visits_per_patient: 12.0,
        ..Default::default()
    };
    let g = generate(&cfg).unwrap();
    let (labels, _) = annotate_all(&g.streams, &cfg.cohort_rules()).unwrap();
    let ids: Vec<String> = labels
        .iter()
        .filter(|l| l.status.is_labeled())
        .map(|l| l.patient_id.clone())
        .collect();
    let split = split(&ids, &SplitSpec::default()).unwrap();
    let settings = CorpusSettings {
        max_len: 64,
        ..Default::default()
    };
    Cohort {
        streams: g.streams,
        labels,
        split,
        settings,
    }
}

fn prepared(c: &Cohort, task: Task) -> PreparedCorpus {
    PreparedCorpus::build(&c.streams, &c.labels, task, &c.settings, &c.split, &BTreeSet::new(), 0.2).unwrap()
}

fn lr() -> ModelConfig {
    ModelConfig::new(ModelKind::Lr)
}

#[test]
fn subsamples_are_seeded_nested_and_disjoint_from_test() {
    let c = cohort();
    let p = prepared(&c, Task::Detection);
    let full = p.fit_size();
    let test: BTreeSet<&str> = p.test.iter().map(|s| s.patient_id.as_str()).collect();
    let ids = |(t, v): &(Vec<ehrseq::corpus::CodeSequence>, Vec<ehrseq::corpus::CodeSequence>)| -> BTreeSet<String> {
        t.iter().chain(v).map(|s| s.patient_id.clone()).collect()
    };
    let small = p.subsample(40, 7).unwrap();
    let large = p.subsample(120, 7).unwrap();
    assert_eq!(small, p.subsample(40, 7).unwrap());
    assert_eq!(ids(&small).len(), 40);
    assert_eq!(small.1.len(), 8);
    assert!(ids(&small).is_subset(&ids(&large)));
    assert!(ids(&large).iter().all(|id| !test.contains(id.as_str())));
    assert_ne!(ids(&small), ids(&p.subsample(40, 8).unwrap()));
    let all = p.subsample(full, 3).unwrap();
    assert_eq!((all.0, all.1), (p.train.clone(), p.validation.clone()));
    assert!(p.subsample(full + 1, 3).is_err());
}

#[test]
fn tasks_share_the_test_set_and_reports_are_labeled() {
    let c = cohort();
    let det = prepared(&c, Task::Detection);
    let pred = prepared(&c, Task::Prediction);
    assert_eq!(det.test_hash, pred.test_hash);
    let reports = run_task(&det, &[lr()], &[1, 2]).unwrap();
    assert_eq!(reports.len(), 2);
    for r in &reports {
        assert_eq!(r.descriptor.task, Task::Detection);
        assert_eq!(r.descriptor.model, "lr");
        assert_eq!(r.descriptor.train_size, det.fit_size());
        assert_eq!(r.test_hash, det.test_hash);
        assert_eq!(r.n_pos + r.n_neg, det.test.len());
    }
    let means = mean_auc(&reports);
    assert_eq!(means.len(), 1);
    assert_eq!(means[0].2.len(), 2);
}

#[test]
fn sweep_and_ablation_cover_every_cell() {
    let c = cohort();
    let det = prepared(&c, Task::Detection);
    let sweep = size_sweep(&det, &[lr()], &[30, 60], &[1]).unwrap();
    let sizes: Vec<usize> = sweep.iter().map(|r| r.descriptor.train_size).collect();
    assert_eq!(sizes, [30, 60]);
    assert!(size_sweep(&det, &[lr()], &[det.fit_size() + 1], &[1]).is_err());

    let subsets: Vec<ModalitySet> = ["diag", "pres", "all"].iter().map(|s| s.parse().unwrap()).collect();
    let abl = ablation(
        &c.streams,
        &c.labels,
        Task::Detection,
        &c.settings,
        &c.split,
        &BTreeSet::new(),
        0.2,
        &[lr()],
        &subsets,
        &[1],
    )
    .unwrap();
    let seen: Vec<ModalitySet> = abl.iter().map(|r| r.descriptor.modalities).collect();
    assert_eq!(seen, subsets);
    assert!(abl.iter().all(|r| r.test_hash == det.test_hash));
}

fn read_dir(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn reports_are_byte_identical_across_runs_and_input_orders() {
    let c = cohort();
    let det = prepared(&c, Task::Detection);
    let reports = size_sweep(&det, &[lr()], &[40, 80], &[1, 2]).unwrap();
    let mut shuffled = reports.clone();
    shuffled.reverse();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ctx = serde_json::json!({"run": "test"});
    let files = write_report(&reports, a.path(), ctx.clone()).unwrap();
    write_report(&shuffled, b.path(), ctx).unwrap();
    assert_eq!(read_dir(a.path()), read_dir(b.path()));
    assert_eq!(files.roc_csv.len(), 4);
    assert!(files.plots.iter().any(|p| p.file_name().unwrap() == "sweep_detection.svg"));

    let metrics = std::fs::read_to_string(files.metrics).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next(),
        Some("task,model,modalities,train_size,seed,auc,n_pos,n_neg,test_hash")
    );
    assert_eq!(lines.count(), 4);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(files.manifest).unwrap()).unwrap();
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 4);
    assert_eq!(manifest["test_hashes"].as_array().unwrap().len(), 1);
}

#[test]
fn empty_report_has_a_manifest_and_no_plots() {
    let dir = tempfile::tempdir().unwrap();
    let files = write_report(&[] as &[RocReport], dir.path(), serde_json::Value::Null).unwrap();
    assert!(files.plots.is_empty());
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(files.manifest).unwrap()).unwrap();
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 0);
}
