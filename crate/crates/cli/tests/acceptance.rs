//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Run with `cargo test --test acceptance`.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ehrseq::cohort::{annotate, annotate_all, CohortLabel, CohortRules, ExclusionReason, Status};
use ehrseq::corpus::{split, CorpusSettings, ModalitySet, SplitSpec, Task};
use ehrseq::eventstore::{CodeSystem, Day, Domain, EventRecord, PatientStream};
use ehrseq::evalkit::{ablation, mean_auc, roc_auc, run_task, run_task_models, size_sweep, PreparedCorpus};
use ehrseq::models::gradsuite::run_suite;
use ehrseq::models::{ModelConfig, ModelKind, TrainedModel};
use ehrseq::rng::StreamRng;
use ehrseq::syngen::{generate, GenConfig, Generated};

const SEEDS: [u64; 3] = [1, 2, 3];

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(outcome: Outcome, elapsed: Duration, limit: Option<Duration>) -> Outcome {
    match (outcome, limit) {
        (Ok(d), Some(l)) if elapsed > l => Err(format!("{d}; took {:.1}s, limit {}s", elapsed.as_secs_f64(), l.as_secs())),
        (o, _) => o,
    }
}

fn labeled_ids(labels: &[CohortLabel]) -> Vec<String> {
    labels.iter().filter(|l| l.status.is_labeled()).map(|l| l.patient_id.clone()).collect()
}

/// Default cohort and its labels, shared by criteria 1, 5 and 6.
struct Cohort {
    generated: Generated,
    rules: CohortRules,
    labels: Vec<CohortLabel>,
}

fn default_cohort() -> Cohort {
    let gen = GenConfig::default();
    let generated = generate(&gen).unwrap();
    let rules = gen.cohort_rules();
    let (labels, _) = annotate_all(&generated.streams, &rules).unwrap();
    Cohort { generated, rules, labels }
}

fn prepare(streams: &[PatientStream], labels: &[CohortLabel], task: Task, max_len: usize) -> PreparedCorpus {
    let sp = split(&labeled_ids(labels), &SplitSpec::default()).unwrap();
    let settings = CorpusSettings { max_len, ..Default::default() };
    PreparedCorpus::build(streams, labels, task, &settings, &sp, &BTreeSet::new(), 0.2).unwrap()
}

fn sequence_model(kind: ModelKind, hidden: usize, max_len: usize) -> ModelConfig {
    let mut m = ModelConfig::new(kind);
    m.hidden_size = hidden;
    m.learning_rate = if kind == ModelKind::Transformer { 5e-3 } else { 1e-2 };
    m.max_epochs = 30;
    m.patience = 5;
    m.transformer.layers = 1;
    m.transformer.heads = 2;
    m.transformer.ff_size = 2 * hidden;
    m.transformer.max_positions = max_len + 1;
    m.transformer.pretrain = false;
    m
}

fn small_transformer(max_len: usize) -> ModelConfig {
    let mut m = sequence_model(ModelKind::Transformer, 32, max_len);
    m.learning_rate = 2e-3;
    m.patience = 8;
    m
}

fn mean_of(reports: &[ehrseq::evalkit::RocReport], model: &str) -> f64 {
    mean_auc(reports).into_iter().find(|(d, _, _)| d.model == model).map(|(_, m, _)| m).unwrap()
}

fn cohort_oracle(c: &Cohort) -> Outcome {
    let mut mismatches = 0;
    for (label, truth) in c.labels.iter().zip(&c.generated.truth) {
        assert_eq!(label.patient_id, truth.patient_id);
        if label.status != truth.intended_label || label.exclusion_reason != truth.exclusion_reason {
            mismatches += 1;
        }
    }
    let early = c.labels.iter().filter(|l| l.exclusion_reason == Some(ExclusionReason::EarlyEvent)).count();

    let index = Day::from_ymd(2012, 6, 1).unwrap();
    let record = |offset: i32, domain, code: &str, emergency| EventRecord {
        patient_id: "P".into(),
        date: index.offset(offset),
        domain,
        system: if domain == Domain::Prescription { CodeSystem::BNF } else { CodeSystem::ICD10 },
        code: code.into(),
        emergency_admission: emergency,
        source_tag: String::new(),
    };
    let drug = c.rules.index_drug_codes.iter().next().unwrap().clone();
    let marker = c.rules.tf_event_codes.iter().next().unwrap().clone();
    let at = |day: i32| {
        let stream = PatientStream::new(
            "P",
            vec![record(0, Domain::Prescription, &drug, false), record(day, Domain::Diagnosis, &marker, true)],
        );
        annotate(&stream, &c.rules).unwrap()
    };
    let fixtures = [
        (7, Status::Excluded, Some(ExclusionReason::EarlyEvent)),
        (365, Status::Case, None),
        (366, Status::Control, None),
    ];
    let fixture_ok = fixtures.iter().all(|&(day, status, reason)| {
        let l = at(day);
        l.status == status && l.exclusion_reason == reason
    });
    check(
        mismatches == 0 && early > 0 && fixture_ok,
        format!("{} patients, {mismatches} disagreements, {early} early-event exclusions, fixtures ok: {fixture_ok}", c.labels.len()),
    )
}

fn brute_force(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    num / den
}

fn auc_oracle() -> Outcome {
    let mut rng = StreamRng::new(7, 0);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < 1000 {
        let n = rng.between(2, 200) as usize;
        // Coarse scores so ties are common.
        let levels = rng.between(2, 40) as u64;
        let scores: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 / levels as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.chance(0.5))).collect();
        if !labels.contains(&0) || !labels.contains(&1) {
            continue;
        }
        let got = roc_auc(&scores, &labels).map_err(|e| e.to_string())?.auc;
        worst = worst.max((got - brute_force(&scores, &labels)).abs());
        done += 1;
    }
    check(worst <= 1e-9, format!("1000 instances, max |diff| {worst:.2e}"))
}

fn gradients() -> Outcome {
    let checks = run_suite(20, 2021).map_err(|e| e.to_string())?;
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed()).map(|c| format!("{} {}", c.layer, c.shape)).collect();
    let layers: BTreeSet<&str> = checks.iter().map(|c| c.layer).collect();
    let worst = checks.iter().map(|c| c.result.max_rel_error).fold(0.0, f64::max);
    check(
        failed.is_empty(),
        format!("{} checks over {} layers, max rel error {worst:.2e}, failed {failed:?}", checks.len(), layers.len()),
    )
}

fn order_gen() -> GenConfig {
    GenConfig {
        n_patients: 2500,
        mean_visits_per_patient: 12.0,
        index_drug_fraction: 1.0,
        case_prevalence: 0.5,
        early_event_rate: 0.0,
        order_signal_strength: 1.0,
        ..Default::default()
    }
}

fn order_separation() -> Outcome {
    let gen = order_gen();
    let g = generate(&gen).unwrap();
    let (labels, _) = annotate_all(&g.streams, &gen.cohort_rules()).unwrap();
    let max_len = 64;
    let corpus = prepare(&g.streams, &labels, Task::Prediction, max_len);
    let models = vec![
        ModelConfig::new(ModelKind::Lr),
        ModelConfig::new(ModelKind::Rf),
        sequence_model(ModelKind::Gru, 16, max_len),
        sequence_model(ModelKind::Lstm, 16, max_len),
        small_transformer(max_len),
    ];
    let reports = run_task(&corpus, &models, &SEEDS).map_err(|e| e.to_string())?;
    let m = |name| mean_of(&reports, name);
    let (lr, rf) = (m("lr"), m("rf"));
    let (gru, lstm, tr) = (m("gru"), m("lstm"), m("transformer-scratch"));
    check(
        gru >= 0.85 && lstm >= 0.85 && tr >= 0.85 && lr <= 0.65 && rf <= 0.65,
        format!(
            "fit {} / test {}: gru {gru:.3} lstm {lstm:.3} transformer {tr:.3} | lr {lr:.3} rf {rf:.3}",
            corpus.fit_size(),
            corpus.test.len()
        ),
    )
}

fn detection_beats_prediction(c: &Cohort) -> Outcome {
    let max_len = 128;
    let kinds = [ModelKind::Gru, ModelKind::Lstm, ModelKind::Transformer];
    let models: Vec<ModelConfig> = kinds
        .iter()
        .map(|&k| {
            let mut m = sequence_model(k, 16, max_len);
            m.max_epochs = 15;
            m
        })
        .collect();
    let mut means = Vec::new();
    for task in [Task::Detection, Task::Prediction] {
        let corpus = prepare(&c.generated.streams, &c.labels, task, max_len);
        let reports = run_task(&corpus, &models, &SEEDS).map_err(|e| e.to_string())?;
        means.push(mean_auc(&reports));
    }
    let mut ok = true;
    let mut parts = Vec::new();
    for ((d, det, _), (_, pred, _)) in means[0].iter().zip(&means[1]) {
        ok &= det - pred >= 0.05;
        parts.push(format!("{} {det:.3}-{pred:.3}", d.model));
    }
    check(ok, parts.join(", "))
}

fn pretraining_at_small_n(c: &Cohort) -> Outcome {
    let max_len = 128;
    let corpus = prepare(&c.generated.streams, &c.labels, Task::Detection, max_len);
    let mut scratch = sequence_model(ModelKind::Transformer, 16, max_len);
    scratch.learning_rate = 2e-3;
    scratch.patience = 8;
    let mut pre = scratch.clone();
    pre.transformer.pretrain = true;
    pre.transformer.pretrain_epochs = 20;
    pre.transformer.pretrain_learning_rate = 5e-3;
    let reports = size_sweep(&corpus, &[pre, scratch], &[100], &SEEDS).map_err(|e| e.to_string())?;
    let (p, s) = (mean_of(&reports, "transformer"), mean_of(&reports, "transformer-scratch"));
    check(
        p >= s,
        format!("100 labeled, pool {}: pretrained {p:.3} vs scratch {s:.3}", corpus.pretrain_pool.len()),
    )
}

fn modality_ablation() -> Outcome {
    let gen = order_gen();
    let g = generate(&gen).unwrap();
    let (labels, _) = annotate_all(&g.streams, &gen.cohort_rules()).unwrap();
    let max_len = 64;
    let sp = split(&labeled_ids(&labels), &SplitSpec::default()).unwrap();
    let settings = CorpusSettings { max_len, ..Default::default() };
    let subsets: Vec<ModalitySet> = ["proc", "diag", "pres", "all"].iter().map(|s| s.parse().unwrap()).collect();
    let reports = ablation(
        &g.streams,
        &labels,
        Task::Prediction,
        &settings,
        &sp,
        &BTreeSet::new(),
        0.2,
        &[sequence_model(ModelKind::Gru, 16, max_len)],
        &subsets,
        &SEEDS,
    )
    .map_err(|e| e.to_string())?;
    let means = mean_auc(&reports);
    let all = means.iter().find(|(d, _, _)| d.modalities == ModalitySet::ALL).unwrap().1;
    let best_single = means.iter().filter(|(d, _, _)| d.modalities != ModalitySet::ALL).map(|m| m.1).fold(0.0, f64::max);
    let parts: Vec<String> = means.iter().map(|(d, m, _)| format!("{} {m:.3}", d.modalities)).collect();
    check(all - best_single >= 0.03, parts.join(", "))
}

fn report_csvs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.join("report"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn reproducibility() -> Outcome {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let status = Command::new(env!("CARGO_BIN_EXE_ehrseq"))
            .args(["all", "-q", "--config"])
            .arg(&config)
            .arg("--paths.out_dir")
            .arg(d.path())
            .env_remove("EHRSEQ_SEED")
            .output()
            .unwrap();
        if !status.status.success() {
            return Err(format!("`all` failed: {}", String::from_utf8_lossy(&status.stdout)));
        }
    }
    let (a, b) = (report_csvs(dirs[0].path()), report_csvs(dirs[1].path()));
    let has_metrics = a.iter().any(|(n, _)| n == "metrics.csv");
    let roc = a.iter().filter(|(n, _)| n.starts_with("roc")).count();
    check(
        has_metrics && roc > 0 && a == b,
        format!("{} csv files ({roc} roc), identical: {}", a.len(), a == b),
    )
}

fn persistence() -> Outcome {
    let gen = GenConfig { n_patients: 600, ..Default::default() };
    let g = generate(&gen).unwrap();
    let (labels, _) = annotate_all(&g.streams, &gen.cohort_rules()).unwrap();
    let max_len = 32;
    let corpus = prepare(&g.streams, &labels, Task::Detection, max_len);
    let models: Vec<ModelConfig> = ModelKind::ALL
        .iter()
        .map(|&k| {
            let mut m = sequence_model(k, 8, max_len);
            m.max_epochs = 3;
            m.rf.n_trees = 20;
            if k == ModelKind::Transformer {
                m.transformer.pretrain = true;
                m.transformer.pretrain_epochs = 1;
            }
            m
        })
        .collect();
    let trained = run_task_models(&corpus, &models, &[1]).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().unwrap();
    let mut bad = Vec::new();
    for (model, report) in &trained {
        let path = dir.path().join(format!("{}.ckpt", report.descriptor.model));
        model.save(&path).map_err(|e| e.to_string())?;
        let loaded = TrainedModel::load(&path).map_err(|e| e.to_string())?;
        let before: Vec<u64> = model.score(&corpus.test).unwrap().iter().map(|v| v.to_bits()).collect();
        let after: Vec<u64> = loaded.score(&corpus.test).unwrap().iter().map(|v| v.to_bits()).collect();
        if before != after {
            bad.push(report.descriptor.model.clone());
        }
    }
    check(
        bad.is_empty() && trained.len() == ModelKind::ALL.len(),
        format!("{} kinds on {} test patients, mismatched: {bad:?}", trained.len(), corpus.test.len()),
    )
}

fn main() {
    let mins = |m: u64| Some(Duration::from_secs(60 * m));
    let secs = |s: u64| Some(Duration::from_secs(s));
    // ACCEPTANCE_ONLY=4,6 runs a subset.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let mut failed = 0;
    let mut report = |n: usize, name: &str, limit: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            return;
        }
        let t = Instant::now();
        let outcome = f();
        let elapsed = t.elapsed();
        let outcome = within(outcome, elapsed, limit);
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {n} {name} ({:.1}s): {detail}", elapsed.as_secs_f64());
    };

    let t = Instant::now();
    let cohort = default_cohort();
    let setup = t.elapsed();
    report(1, "cohort oracle", secs(10), &mut || {
        let t = Instant::now();
        let r = cohort_oracle(&cohort);
        // Generation and labeling both count towards the budget.
        within(r, t.elapsed() + setup, secs(10))
    });
    report(2, "auc oracle", secs(30), &mut auc_oracle);
    report(3, "gradient suite", secs(60), &mut gradients);
    report(4, "order-signal separation", mins(10), &mut order_separation);
    report(5, "detection beats prediction", mins(10), &mut || detection_beats_prediction(&cohort));
    report(6, "pre-training at small n", None, &mut || pretraining_at_small_n(&cohort));
    report(7, "modality ablation", None, &mut modality_ablation);
    report(8, "reproducibility", None, &mut reproducibility);
    report(9, "persistence", None, &mut persistence);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
