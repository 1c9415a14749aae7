//! One function per subcommand. Every stage reads its inputs from the run
//! directory, writes its outputs there, and records both with SHA-256
//! digests in `manifests/<command>.json`.
//!
//! Run directory layout:
//!
//! ```text
//! data/       events.jsonl truth.jsonl generator.json labels.csv cohort_summary.json rules.json
//! corpus/     split.json vocab.json pool.json <task>/sequences.jsonl
//! models/     pretrained/<model>_s<seed>.ckpt <task>/<model>_s<seed>.ckpt
//! results/    main/reports.json sweep/reports.json ablation/reports.json
//! report/     metrics.csv summary.csv roc_<id>.csv roc_<id>.svg sweep_<task>.svg manifest.json
//! manifests/  <command>.json
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ehrseq::cohort::{annotate_all, read_labels, write_labels, CohortLabel};
use ehrseq::corpus::{build_vocab, encode_cohort, encode_unlabeled_pool, read_sequences, split, write_sequences, Split, Task, Vocabulary};
use ehrseq::evalkit::report::sha256_hex;
use ehrseq::evalkit::{ablation, evaluate, model_label, size_sweep, write_report, PreparedCorpus, RocReport};
use ehrseq::eventstore::{emit, ingest, Format, PatientStream};
use ehrseq::models::{self, pretrain_transformer, ModelConfig, ModelKind, TrainedModel};
use ehrseq::syngen::{describe, generate, read_truth, write_truth};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{Loaded, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Generate,
    Annotate,
    BuildCorpus,
    Pretrain,
    Train,
    Evaluate,
    Sweep,
    Ablate,
    Report,
    All,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Annotate => "annotate",
            Command::BuildCorpus => "build-corpus",
            Command::Pretrain => "pretrain",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Sweep => "sweep",
            Command::Ablate => "ablate",
            Command::Report => "report",
            Command::All => "all",
        }
    }
}

/// What a stage wrote, and what it needed to write it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    /// Resolved config, with every derived seed filled in.
    pub config: RunConfig,
    pub config_file: Option<FileDigest>,
    pub warnings: Vec<String>,
    /// Paths relative to the run directory when inside it.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub details: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Default)]
struct Record {
    inputs: BTreeSet<PathBuf>,
    outputs: BTreeSet<PathBuf>,
    warnings: Vec<String>,
    details: Map<String, Value>,
}

impl Record {
    fn detail(&mut self, key: &str, value: impl Serialize) {
        self.details.insert(key.into(), serde_json::to_value(value).expect("detail serializes"));
    }

    fn warn(&mut self, message: String) {
        log::warn!("{message}");
        self.warnings.push(message);
    }
}

fn digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| ehrseq::Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// A missing stage input, phrased as what to run first.
fn require(path: &Path, producer: &str) -> Result<()> {
    if path.is_file() {
        return Ok(());
    }
    let e = std::io::Error::new(std::io::ErrorKind::NotFound, format!("not found; run `ehrseq {producer}` first"));
    Err(ehrseq::Error::io(path, e).into())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| ehrseq::Error::io(path, e))?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| ehrseq::Error::io(path, e))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| ehrseq::Error::io(path, e))?;
    Ok(())
}

fn with_seed(config: &ModelConfig, seed: u64) -> ModelConfig {
    ModelConfig {
        seed,
        ..config.clone()
    }
}

fn needs_pretraining(m: &ModelConfig) -> bool {
    m.kind == ModelKind::Transformer && m.transformer.pretrain
}

pub struct Pipeline {
    pub config: RunConfig,
    pub seed: u64,
    pub warnings: Vec<String>,
    pub config_file: Option<PathBuf>,
    out: PathBuf,
}

impl Pipeline {
    pub fn new(loaded: Loaded, config_file: Option<PathBuf>) -> Pipeline {
        let out = loaded.config.paths.out_dir.clone();
        Pipeline {
            config: loaded.config,
            seed: loaded.seed,
            warnings: loaded.warnings,
            config_file,
            out,
        }
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn events_path(&self) -> PathBuf {
        self.config.paths.events.clone().unwrap_or_else(|| self.path("data/events.jsonl"))
    }

    fn key(&self, p: &Path) -> String {
        p.strip_prefix(&self.out).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    /// Tasks that need an encoded corpus.
    fn corpus_tasks(&self) -> Vec<Task> {
        let e = &self.config.experiments;
        let mut tasks = e.tasks.clone();
        if !e.sweep_sizes.is_empty() && !tasks.contains(&e.sweep_task) {
            tasks.push(e.sweep_task);
        }
        tasks
    }

    fn masked(&self) -> Result<BTreeSet<String>> {
        Ok(if self.config.corpus.mask_outcome_codes {
            self.config.cohort_rules()?.tf_event_codes
        } else {
            BTreeSet::new()
        })
    }

    /// Runs one subcommand after validating the config, and writes its
    /// manifest.
    pub fn run(&self, cmd: Command) -> Result<Manifest> {
        let violations = self.config.violations();
        if !violations.is_empty() {
            return Err(ehrseq::Error::Config(violations).into());
        }
        if cmd == Command::All {
            return self.run_all();
        }
        mkdir(&self.out)?;
        log::info!("{}: run directory {}", cmd.name(), self.out.display());
        let mut rec = Record::default();
        match cmd {
            Command::Generate => self.generate(&mut rec)?,
            Command::Annotate => self.annotate(&mut rec)?,
            Command::BuildCorpus => self.build_corpus(&mut rec)?,
            Command::Pretrain => self.pretrain(&mut rec)?,
            Command::Train => self.train(&mut rec)?,
            Command::Evaluate => self.evaluate(&mut rec)?,
            Command::Sweep => self.sweep(&mut rec)?,
            Command::Ablate => self.ablate(&mut rec)?,
            Command::Report => self.report(&mut rec)?,
            Command::All => unreachable!(),
        }
        self.finish(cmd, rec)
    }

    fn run_all(&self) -> Result<Manifest> {
        let e = &self.config.experiments;
        let mut stages = vec![];
        if self.config.paths.events.is_none() {
            stages.push(Command::Generate);
        }
        stages.extend([Command::Annotate, Command::BuildCorpus]);
        if self.config.models.iter().any(needs_pretraining) {
            stages.push(Command::Pretrain);
        }
        stages.extend([Command::Train, Command::Evaluate]);
        if !e.sweep_sizes.is_empty() {
            stages.push(Command::Sweep);
        }
        if e.ablation {
            stages.push(Command::Ablate);
        }
        stages.push(Command::Report);

        let mut rec = Record::default();
        let mut produced = BTreeSet::new();
        for cmd in &stages {
            let m = self.run(*cmd)?;
            for (k, _) in m.inputs {
                if !produced.contains(&k) {
                    rec.inputs.insert(self.out.join(&k));
                }
            }
            for (k, _) in m.outputs {
                rec.outputs.insert(self.out.join(&k));
                produced.insert(k);
            }
            rec.warnings.extend(m.warnings.into_iter().filter(|w| !self.warnings.contains(w)));
        }
        rec.detail("stages", stages.iter().map(|c| c.name()).collect::<Vec<_>>());
        self.finish(Command::All, rec)
    }

    fn finish(&self, cmd: Command, rec: Record) -> Result<Manifest> {
        let digests = |set: &BTreeSet<PathBuf>| -> Result<BTreeMap<String, String>> {
            set.iter().map(|p| Ok((self.key(p), digest(p)?))).collect()
        };
        let config_file = match &self.config_file {
            Some(p) => Some(FileDigest {
                path: p.to_string_lossy().into_owned(),
                sha256: digest(p)?,
            }),
            None => None,
        };
        let manifest = Manifest {
            command: cmd.name().into(),
            seed: self.seed,
            config: self.config.clone(),
            config_file,
            warnings: self.warnings.iter().cloned().chain(rec.warnings).collect(),
            inputs: digests(&rec.inputs)?,
            outputs: digests(&rec.outputs)?,
            details: rec.details,
        };
        let dir = self.path("manifests");
        mkdir(&dir)?;
        write_json(&dir.join(format!("{}.json", cmd.name())), &manifest)?;
        Ok(manifest)
    }

    fn load_streams(&self, rec: &mut Record) -> Result<Vec<PatientStream>> {
        let p = self.events_path();
        require(&p, "generate")?;
        let streams = ingest(&p, Format::from_path(&p))?.into_strict()?;
        rec.inputs.insert(p);
        Ok(streams)
    }

    fn load_labels(&self, rec: &mut Record) -> Result<Vec<CohortLabel>> {
        let p = self.path("data/labels.csv");
        require(&p, "annotate")?;
        rec.inputs.insert(p.clone());
        Ok(read_labels(&p)?)
    }

    fn load_split(&self, rec: &mut Record) -> Result<Split> {
        let p = self.path("corpus/split.json");
        require(&p, "build-corpus")?;
        rec.inputs.insert(p.clone());
        Ok(Split::load(&p)?)
    }

    fn load_corpus(&self, task: Task, rec: &mut Record) -> Result<PreparedCorpus> {
        let split = self.load_split(rec)?;
        let vocab_path = self.path("corpus/vocab.json");
        let pool_path = self.path("corpus/pool.json");
        let seq_path = self.path(&format!("corpus/{task}/sequences.jsonl"));
        for p in [&vocab_path, &pool_path, &seq_path] {
            require(p, "build-corpus")?;
            rec.inputs.insert(p.clone());
        }
        let vocab = Vocabulary::load(&vocab_path)?;
        let pool: Vec<(String, Vec<u32>)> = read_json(&pool_path)?;
        let sequences = read_sequences(&seq_path)?;
        Ok(PreparedCorpus::from_parts(
            task,
            self.config.corpus.modalities,
            vocab,
            sequences,
            &split,
            pool.into_iter().map(|(_, ids)| ids).collect(),
            self.config.split.validation_fraction,
        )?)
    }

    fn checkpoint(&self, dir: &str, label: &str, seed: u64) -> PathBuf {
        self.path(&format!("models/{dir}/{label}_s{seed}.ckpt"))
    }

    /// (model, seed) cells in config order.
    fn cells(&self, models: &[ModelConfig]) -> Vec<(ModelConfig, u64)> {
        models
            .iter()
            .flat_map(|m| self.config.experiments.seeds.iter().map(move |&s| (m.clone(), s)))
            .collect()
    }

    fn generate(&self, rec: &mut Record) -> Result<()> {
        if self.config.paths.events.is_some() {
            rec.warn("paths.events is set; later stages read that file, not the generated one".into());
        }
        let cfg = &self.config.generator;
        log::info!("generating {} patients (seed {})", cfg.n_patients, cfg.seed);
        let g = generate(cfg)?;
        let dir = self.path("data");
        mkdir(&dir)?;
        let events = dir.join("events.jsonl");
        let truth = dir.join("truth.jsonl");
        let manifest = dir.join("generator.json");
        emit(&g.streams, &events, Format::Jsonl)?;
        write_truth(&g.truth, &truth)?;
        write_json(&manifest, &describe(cfg))?;
        rec.detail("patients", g.streams.len());
        rec.detail("events", g.streams.iter().map(PatientStream::len).sum::<usize>());
        rec.outputs.extend([events, truth, manifest]);
        Ok(())
    }

    fn annotate(&self, rec: &mut Record) -> Result<()> {
        let streams = self.load_streams(rec)?;
        if let Some(p) = &self.config.paths.rules {
            rec.inputs.insert(p.clone());
        }
        let rules = self.config.cohort_rules()?;
        let (labels, summary) = annotate_all(&streams, &rules)?;
        log::info!(
            "cohort: {} cases, {} controls, {} excluded, {} outside the cohort",
            summary.case,
            summary.control,
            summary.excluded,
            summary.not_in_cohort
        );
        let dir = self.path("data");
        mkdir(&dir)?;
        let labels_path = dir.join("labels.csv");
        let summary_path = dir.join("cohort_summary.json");
        let rules_path = dir.join("rules.json");
        write_labels(&labels, &labels_path)?;
        write_json(&summary_path, &summary)?;
        rules.save(&rules_path)?;
        rec.outputs.extend([labels_path, summary_path, rules_path]);

        let truth_path = self.path("data/truth.jsonl");
        if self.config.paths.events.is_none() && truth_path.is_file() {
            let truth = read_truth(&truth_path)?;
            rec.inputs.insert(truth_path);
            let intended: HashMap<&str, _> = truth.iter().map(|t| (t.patient_id.as_str(), t)).collect();
            let disagree = labels
                .iter()
                .filter(|l| {
                    intended
                        .get(l.patient_id.as_str())
                        .is_none_or(|t| t.intended_label != l.status || t.exclusion_reason != l.exclusion_reason)
                })
                .count();
            if disagree > 0 {
                rec.warn(format!("{disagree} label(s) differ from the generator's intended labels"));
            }
            rec.detail("truth_disagreements", disagree);
        }
        rec.detail("summary", summary);
        Ok(())
    }

    fn build_corpus(&self, rec: &mut Record) -> Result<()> {
        let streams = self.load_streams(rec)?;
        let labels = self.load_labels(rec)?;
        let settings = &self.config.corpus;
        let masked = self.masked()?;
        let ids: Vec<String> = labels
            .iter()
            .filter(|l| l.status.is_labeled())
            .map(|l| l.patient_id.clone())
            .collect();
        let sp = split(&ids, &self.config.split)?;
        let vocab = build_vocab(&streams, settings.modalities, settings.min_frequency)?;
        let pool = encode_unlabeled_pool(&streams, &labels, &vocab, settings);
        log::info!(
            "corpus: vocabulary of {} ids, {} pre-training sequences, split {}/{}/{}",
            vocab.size(),
            pool.len(),
            sp.train.len(),
            sp.validation.len(),
            sp.test.len()
        );

        let dir = self.path("corpus");
        mkdir(&dir)?;
        let split_path = dir.join("split.json");
        let vocab_path = dir.join("vocab.json");
        let pool_path = dir.join("pool.json");
        sp.save(&split_path)?;
        vocab.save(&vocab_path)?;
        write_json(&pool_path, &pool)?;
        rec.outputs.extend([split_path, vocab_path, pool_path]);
        rec.detail("vocab_size", vocab.size());
        rec.detail("pretrain_pool", pool.len());
        rec.detail("test_hash", sp.test_hash());

        let mut cases = Map::new();
        for task in self.corpus_tasks() {
            let seqs = encode_cohort(&streams, &labels, task, &vocab, settings, &masked)?;
            let task_dir = dir.join(task.as_str());
            mkdir(&task_dir)?;
            let p = task_dir.join("sequences.jsonl");
            write_sequences(&seqs, &p)?;
            rec.outputs.insert(p);
            let pos = seqs.iter().filter(|s| s.label == 1).count();
            cases.insert(task.to_string(), json!({"sequences": seqs.len(), "cases": pos}));
        }
        rec.detail("tasks", cases);
        Ok(())
    }

    fn pretrain(&self, rec: &mut Record) -> Result<()> {
        let vocab_path = self.path("corpus/vocab.json");
        let pool_path = self.path("corpus/pool.json");
        for p in [&vocab_path, &pool_path] {
            require(p, "build-corpus")?;
            rec.inputs.insert(p.clone());
        }
        let vocab = Vocabulary::load(&vocab_path)?;
        let pool: Vec<Vec<u32>> = read_json::<Vec<(String, Vec<u32>)>>(&pool_path)?
            .into_iter()
            .map(|(_, ids)| ids)
            .collect();
        let models: Vec<ModelConfig> = self.config.models.iter().filter(|m| needs_pretraining(m)).cloned().collect();
        if models.is_empty() {
            rec.warn("no model asks for pre-training".into());
        }
        mkdir(&self.path("models/pretrained"))?;
        let done: Vec<(PathBuf, Value)> = self
            .cells(&models)
            .into_par_iter()
            .map(|(m, seed)| -> Result<(PathBuf, Value)> {
                let label = model_label(&m);
                log::info!("pre-training {label} (seed {seed}) on {} sequences", pool.len());
                let model = pretrain_transformer(&with_seed(&m, seed), &vocab, &pool)?;
                let p = self.checkpoint("pretrained", &label, seed);
                model.save(&p)?;
                let meta = &model.meta;
                let summary = json!({
                    "epochs": meta.pretrain_losses.len(),
                    "final_loss": meta.pretrain_losses.last(),
                    "final_masked_accuracy": meta.pretrain_accuracy.last(),
                });
                Ok((p, summary))
            })
            .collect::<Result<_>>()?;
        let mut details = Map::new();
        for (p, summary) in done {
            details.insert(self.key(&p), summary);
            rec.outputs.insert(p);
        }
        rec.detail("checkpoints", details);
        Ok(())
    }

    fn train(&self, rec: &mut Record) -> Result<()> {
        let cells = self.cells(&self.config.models);
        let mut details = Map::new();
        for task in self.config.experiments.tasks.clone() {
            let corpus = self.load_corpus(task, rec)?;
            mkdir(&self.path(&format!("models/{task}")))?;
            let pretrained: Vec<PathBuf> = cells
                .iter()
                .filter(|(m, _)| needs_pretraining(m))
                .map(|(m, s)| self.checkpoint("pretrained", &model_label(m), *s))
                .collect();
            for p in &pretrained {
                require(p, "pretrain")?;
                rec.inputs.insert(p.clone());
            }
            let done: Vec<(PathBuf, Value)> = cells
                .par_iter()
                .map(|(m, seed)| -> Result<(PathBuf, Value)> {
                    let label = model_label(m);
                    let base = if needs_pretraining(m) {
                        Some(TrainedModel::load(&self.checkpoint("pretrained", &label, *seed))?)
                    } else {
                        None
                    };
                    log::info!("training {task}/{label} (seed {seed}) on {} patients", corpus.train.len());
                    let model = models::train(&with_seed(m, *seed), &corpus.vocab, &corpus.train, &corpus.validation, base.as_ref())?;
                    let p = self.checkpoint(task.as_str(), &label, *seed);
                    model.save(&p)?;
                    let meta = &model.meta;
                    let summary = json!({
                        "epochs": meta.epochs,
                        "best_epoch": meta.best_epoch,
                        "best_valid_auc": meta.best_valid_auc,
                        "degenerate": meta.degenerate,
                    });
                    Ok((p, summary))
                })
                .collect::<Result<_>>()?;
            for (p, summary) in done {
                if summary["degenerate"] == json!(true) {
                    rec.warn(format!("{}: training labels had a single class", self.key(&p)));
                }
                details.insert(self.key(&p), summary);
                rec.outputs.insert(p);
            }
        }
        rec.detail("checkpoints", details);
        Ok(())
    }

    fn write_reports(&self, name: &str, reports: &[RocReport], rec: &mut Record) -> Result<()> {
        let dir = self.path(&format!("results/{name}"));
        mkdir(&dir)?;
        let p = dir.join("reports.json");
        write_json(&p, &reports)?;
        rec.outputs.insert(p);
        let aucs: Map<String, Value> = reports.iter().map(|r| (r.descriptor.id(), json!(r.auc))).collect();
        rec.detail("auc", aucs);
        Ok(())
    }

    fn evaluate(&self, rec: &mut Record) -> Result<()> {
        let cells = self.cells(&self.config.models);
        let mut reports = Vec::new();
        for task in self.config.experiments.tasks.clone() {
            let corpus = self.load_corpus(task, rec)?;
            let paths: Vec<PathBuf> = cells
                .iter()
                .map(|(m, s)| self.checkpoint(task.as_str(), &model_label(m), *s))
                .collect();
            for p in &paths {
                require(p, "train")?;
                rec.inputs.insert(p.clone());
            }
            let scored: Vec<RocReport> = cells
                .par_iter()
                .zip(&paths)
                .map(|((m, _), p)| -> Result<RocReport> {
                    let model = TrainedModel::load(p)?;
                    Ok(evaluate(&model, &corpus, corpus.fit_size(), &model_label(m))?)
                })
                .collect::<Result<_>>()?;
            reports.extend(scored);
        }
        self.write_reports("main", &reports, rec)
    }

    fn sweep(&self, rec: &mut Record) -> Result<()> {
        let e = &self.config.experiments;
        if e.sweep_sizes.is_empty() {
            return Err(ehrseq::Error::Config(vec!["experiments.sweep_sizes is empty".into()]).into());
        }
        let corpus = self.load_corpus(e.sweep_task, rec)?;
        let models = self.config.select_models(&e.sweep_models);
        log::info!("sweep over sizes {:?} with {} model(s)", e.sweep_sizes, models.len());
        let reports = size_sweep(&corpus, &models, &e.sweep_sizes, &e.seeds)?;
        self.write_reports("sweep", &reports, rec)
    }

    fn ablate(&self, rec: &mut Record) -> Result<()> {
        let e = &self.config.experiments;
        let streams = self.load_streams(rec)?;
        let labels = self.load_labels(rec)?;
        let sp = self.load_split(rec)?;
        let models = self.config.select_models(&e.ablation_models);
        let reports = ablation(
            &streams,
            &labels,
            e.ablation_task,
            &self.config.corpus,
            &sp,
            &self.masked()?,
            self.config.split.validation_fraction,
            &models,
            &self.config.ablation_subsets(),
            &e.seeds,
        )?;
        self.write_reports("ablation", &reports, rec)
    }

    fn report(&self, rec: &mut Record) -> Result<()> {
        let mut reports: Vec<RocReport> = Vec::new();
        for name in ["main", "sweep", "ablation"] {
            let p = self.path(&format!("results/{name}/reports.json"));
            if p.is_file() {
                reports.extend(read_json::<Vec<RocReport>>(&p)?);
                rec.inputs.insert(p);
            }
        }
        if reports.is_empty() {
            rec.warn("no results found; writing an empty report".into());
        }
        // The same cell can come from two experiments (the all-modalities
        // ablation repeats the main run); training is deterministic, so one
        // copy is kept.
        let mut seen: HashMap<_, f64> = HashMap::new();
        let mut unique = Vec::with_capacity(reports.len());
        for r in reports {
            match seen.get(&r.descriptor) {
                Some(&auc) if auc == r.auc => {}
                Some(&auc) => rec.warn(format!(
                    "{}: experiments disagree (AUC {auc} vs {}); keeping the first",
                    r.descriptor.id(),
                    r.auc
                )),
                None => {
                    seen.insert(r.descriptor.clone(), r.auc);
                    unique.push(r);
                }
            }
        }
        let reports = unique;
        let context = json!({"seed": self.seed, "config": self.config});
        let files = write_report(&reports, &self.path("report"), context)?;
        rec.outputs.extend([files.metrics, files.summary, files.manifest]);
        rec.outputs.extend(files.roc_csv);
        rec.outputs.extend(files.plots);
        rec.detail("reports", reports.len());
        Ok(())
    }
}

/// Runs `cmd` on an already-loaded config.
pub fn run(loaded: Loaded, config_file: Option<&Path>, cmd: Command) -> Result<Manifest> {
    Pipeline::new(loaded, config_file.map(Path::to_path_buf)).run(cmd)
}
