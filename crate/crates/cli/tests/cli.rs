use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use ehrseq::cohort::Status;
use ehrseq::evalkit::report::sha256_hex;
use ehrseq::syngen::read_truth;
use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

struct Run {
    code: i32,
    status: Value,
    stdout_lines: usize,
}

fn ehrseq(args: &[&str], env_seed: Option<&str>) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ehrseq"));
    cmd.args(args).arg("-q").env_remove("EHRSEQ_SEED");
    if let Some(s) = env_seed {
        cmd.env("EHRSEQ_SEED", s);
    }
    let out = cmd.output().unwrap();
    let stdout = String::from_utf8(out.stdout).unwrap();
    Run {
        code: out.status.code().unwrap(),
        status: serde_json::from_str(stdout.trim()).unwrap_or(Value::Null),
        stdout_lines: stdout.lines().count(),
    }
}

fn smoke(out: &Path, cmd: &str, extra: &[&str]) -> Run {
    let cfg = configs().join("smoke.json");
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--paths.out_dir", out.to_str().unwrap()];
    args.extend(extra);
    ehrseq(&args, None)
}

fn manifest(out: &Path, cmd: &str) -> Value {
    serde_json::from_slice(&std::fs::read(out.join(format!("manifests/{cmd}.json"))).unwrap()).unwrap()
}

fn digests(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_file() {
            out.insert(p.file_name().unwrap().to_string_lossy().into(), sha256_hex(&std::fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn generate_is_deterministic_and_seeded() {
    let (a, b, c, d) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let r = smoke(dir.path(), "generate", &[]);
        assert_eq!((r.code, r.stdout_lines), (0, 1));
        assert_eq!(r.status["status"], "ok");
    }
    assert_eq!(manifest(a.path(), "generate")["outputs"], manifest(b.path(), "generate")["outputs"]);
    assert_eq!(digests(&a.path().join("data")), digests(&b.path().join("data")));

    // The config's seed outranks EHRSEQ_SEED; without it the variable applies.
    let cfg = configs().join("smoke.json");
    let run = |dir: &Path, env| {
        ehrseq(
            &["generate", "--config", cfg.to_str().unwrap(), "--paths.out_dir", dir.to_str().unwrap(), "--seed", "null"],
            env,
        )
    };
    assert_eq!(run(c.path(), Some("2021")).code, 0);
    assert_eq!(run(d.path(), Some("77")).code, 0);
    assert_eq!(digests(&a.path().join("data")), digests(&c.path().join("data")));
    assert_ne!(digests(&a.path().join("data")), digests(&d.path().join("data")));
    assert_eq!(manifest(d.path(), "generate")["config"]["generator"]["seed"], 77);
}

#[test]
fn annotate_matches_the_generators_intended_labels() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(smoke(dir.path(), "generate", &[]).code, 0);
    let events = dir.path().join("data/events.jsonl");
    let before = sha256_hex(&std::fs::read(&events).unwrap());
    assert_eq!(smoke(dir.path(), "annotate", &[]).code, 0);
    assert_eq!(sha256_hex(&std::fs::read(&events).unwrap()), before);

    let truth = read_truth(&dir.path().join("data/truth.jsonl")).unwrap();
    let count = |s: Status| truth.iter().filter(|t| t.intended_label == s).count();
    let m = manifest(dir.path(), "annotate");
    let summary = &m["details"]["summary"];
    assert_eq!(summary["case"], count(Status::Case));
    assert_eq!(summary["control"], count(Status::Control));
    assert_eq!(summary["excluded"], count(Status::Excluded));
    assert_eq!(summary["not_in_cohort"], count(Status::NotInCohort));
    assert_eq!(m["details"]["truth_disagreements"], 0);
    assert!(m["inputs"].as_object().unwrap().contains_key("data/events.jsonl"));
}

#[test]
fn external_event_files_are_read_and_left_untouched() {
    let src = tempfile::tempdir().unwrap();
    assert_eq!(smoke(src.path(), "generate", &[]).code, 0);
    let events = src.path().join("data/events.jsonl");
    let csv = src.path().join("events.csv");
    let streams = ehrseq::eventstore::ingest(&events, ehrseq::eventstore::Format::Jsonl)
        .unwrap()
        .into_strict()
        .unwrap();
    ehrseq::eventstore::emit(&streams, &csv, ehrseq::eventstore::Format::Csv).unwrap();
    let before = std::fs::read(&csv).unwrap();

    let out = tempfile::tempdir().unwrap();
    let r = smoke(out.path(), "annotate", &["--paths.events", csv.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.status);
    assert_eq!(std::fs::read(&csv).unwrap(), before);
    assert_eq!(
        std::fs::read(out.path().join("data/labels.csv")).unwrap(),
        {
            assert_eq!(smoke(src.path(), "annotate", &[]).code, 0);
            std::fs::read(src.path().join("data/labels.csv")).unwrap()
        }
    );
    let m = manifest(out.path(), "annotate");
    assert_eq!(m["inputs"][csv.to_str().unwrap()], sha256_hex(&before));
}

#[test]
fn validate_reports_violations_as_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(
        &cfg,
        r#"{
            "rules": {"index_drug_codes": ["X"], "tf_event_codes": ["Y"], "blanking_window_days": 365},
            "corpus": {"max_len": 600},
            "paths": {"events": "/no/such/file.jsonl"},
            "shiny_new_option": true
        }"#,
    )
    .unwrap();
    let r = ehrseq(&["validate", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(r.code, 0);
    assert_eq!(r.status["valid"], false);
    let v: Vec<String> = serde_json::from_value(r.status["violations"].clone()).unwrap();
    for needle in ["blanking_window_days", "max_positions", "/no/such/file.jsonl"] {
        assert!(v.iter().any(|e| e.contains(needle)), "{needle} missing from {v:?}");
    }
    assert_eq!(r.status["warnings"][0], "unknown config field shiny_new_option ignored");

    // Running anything with that config fails with every violation listed.
    let r = ehrseq(&["generate", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(r.code, ehrseq_cli::exit_code("config"));
    assert_eq!(r.status["category"], "config");
    assert_eq!(r.status["violations"].as_array().unwrap().len(), v.len());
}

#[test]
fn shipped_configs_are_valid_and_warning_free() {
    for name in ["smoke", "default", "full_scale"] {
        let path = configs().join(format!("{name}.json"));
        let r = ehrseq(&["validate", "--config", path.to_str().unwrap()], None);
        assert_eq!(r.code, 0);
        assert_eq!(r.status["valid"], true, "{name}: {}", r.status);
        assert_eq!(r.status["warnings"], serde_json::json!([]), "{name}");
    }
}

#[test]
fn failures_are_categorized() {
    let dir = tempfile::tempdir().unwrap();
    let r = smoke(dir.path(), "train", &[]);
    assert_eq!((r.code, r.stdout_lines), (ehrseq_cli::exit_code("io"), 1));
    assert_eq!(r.status["status"], "error");
    assert!(r.status["message"].as_str().unwrap().contains("build-corpus"));

    let r = smoke(dir.path(), "generate", &["--generator.n_patient", "5"]);
    assert_eq!(r.code, ehrseq_cli::exit_code("config"));

    let cfg = dir.path().join("broken.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    let r = ehrseq(&["validate", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(r.code, ehrseq_cli::exit_code("input"));

    let events = dir.path().join("events.jsonl");
    std::fs::write(&events, "{\"patient_id\": 1}\n").unwrap();
    let r = smoke(dir.path(), "annotate", &["--paths.events", events.to_str().unwrap()]);
    assert_eq!(r.code, ehrseq_cli::exit_code("input"));
    assert!(r.status["message"].as_str().unwrap().contains("line 1"));
}
