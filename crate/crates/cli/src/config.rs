//! Run configuration: one JSON document covering every stage.
//!
//! Loading goes raw JSON → dotted overrides → unknown-key pruning (each
//! pruned key becomes a warning) → typed config → global seed resolution.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ehrseq::cohort::CohortRules;
use ehrseq::corpus::{CorpusSettings, ModalitySet, SplitSpec, Task};
use ehrseq::evalkit::model_label;
use ehrseq::models::{ModelConfig, ModelKind};
use ehrseq::syngen::GenConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const DEFAULT_SEED: u64 = 2021;
pub const SEED_ENV: &str = "EHRSEQ_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Root of every file a run writes.
    pub out_dir: PathBuf,
    /// External event file; when set, `generate` is skipped and this file
    /// feeds `annotate`.
    pub events: Option<PathBuf>,
    /// Cohort rules file; overrides `rules` and the generator's rules.
    pub rules: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out_dir: PathBuf::from("runs/default"),
            events: None,
            rules: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Experiments {
    pub tasks: Vec<Task>,
    /// Model seeds; empty means `n_seeds` consecutive seeds from the global seed.
    pub seeds: Vec<u64>,
    pub n_seeds: usize,
    pub sweep_task: Task,
    /// Labeled fitting patients (training plus validation) per sweep cell.
    /// Empty disables the sweep.
    pub sweep_sizes: Vec<usize>,
    /// Model labels in the sweep; empty means every model.
    pub sweep_models: Vec<String>,
    pub ablation: bool,
    pub ablation_task: Task,
    /// Empty means all seven non-empty subsets.
    pub ablation_subsets: Vec<ModalitySet>,
    pub ablation_models: Vec<String>,
}

impl Default for Experiments {
    fn default() -> Self {
        Experiments {
            tasks: vec![Task::Detection, Task::Prediction],
            seeds: vec![],
            n_seeds: 3,
            sweep_task: Task::Detection,
            sweep_sizes: vec![],
            sweep_models: vec![],
            ablation: false,
            ablation_task: Task::Detection,
            ablation_subsets: vec![],
            ablation_models: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; the generator, split and model seeds derive from it
    /// unless set explicitly.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub generator: GenConfig,
    /// Cohort rules; `None` uses the rules implied by `generator`.
    pub rules: Option<CohortRules>,
    pub corpus: CorpusSettings,
    pub split: SplitSpec,
    pub models: Vec<ModelConfig>,
    pub experiments: Experiments,
    /// Worker threads for experiment cells; `None` uses all cores.
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut scratch = ModelConfig::new(ModelKind::Transformer);
        scratch.transformer.pretrain = false;
        RunConfig {
            seed: None,
            paths: Paths::default(),
            generator: GenConfig::default(),
            rules: None,
            corpus: CorpusSettings::default(),
            split: SplitSpec::default(),
            models: ModelKind::ALL
                .into_iter()
                .map(ModelConfig::new)
                .chain([scratch])
                .collect(),
            experiments: Experiments::default(),
            jobs: None,
        }
    }
}

/// A config after overrides and seed resolution, with its warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub config: RunConfig,
    pub seed: u64,
    pub warnings: Vec<String>,
}

/// Every key a config may contain, with optional sections filled in so
/// their fields are known too.
fn template() -> Value {
    let mut t = RunConfig::default();
    t.seed = Some(0);
    t.rules = Some(CohortRules::default());
    t.paths.events = Some(PathBuf::new());
    t.paths.rules = Some(PathBuf::new());
    t.jobs = Some(1);
    t.models.truncate(1);
    t.models[0].positive_class_weight = Some(1.0);
    t.models[0].rf.max_depth = Some(1);
    t.models[0].rf.max_features = Some(1);
    serde_json::to_value(t).expect("config serializes")
}

/// Removes keys the template does not know, returning their dotted paths.
fn prune(value: &mut Value, template: &Value, path: &str, out: &mut Vec<String>) {
    let join = |k: &str| if path.is_empty() { k.to_string() } else { format!("{path}.{k}") };
    match (value, template) {
        (Value::Object(map), Value::Object(known)) => {
            let unknown: Vec<String> = map.keys().filter(|k| !known.contains_key(*k)).cloned().collect();
            for k in unknown {
                map.remove(&k);
                out.push(join(&k));
            }
            for (k, v) in map.iter_mut() {
                prune(v, &known[k], &join(k), out);
            }
        }
        (Value::Array(items), Value::Array(known)) => {
            if let Some(first) = known.first() {
                for (i, v) in items.iter_mut().enumerate() {
                    prune(v, first, &join(&i.to_string()), out);
                }
            }
        }
        _ => {}
    }
}

/// Whether a dotted key names a config field. Array indices are checked
/// against the schema of the elements, not the array length.
pub fn is_known_path(key: &str) -> bool {
    let t = template();
    let mut cur = &t;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(map) => match map.get(part) {
                Some(v) => v,
                None => return false,
            },
            Value::Array(items) if part.parse::<usize>().is_ok() => match items.first() {
                Some(v) => v,
                // Element schema unknown (e.g. an empty default list).
                None => return true,
            },
            _ => return false,
        };
    }
    true
}

/// Parses a command-line value: JSON when it parses, otherwise a string.
pub fn parse_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

/// Sets `a.b.0.c` in `root`, creating objects on the way. Numeric parts
/// index arrays.
pub fn set_dotted(root: &mut Value, key: &str, value: Value) -> anyhow::Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed override key {key:?}");
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        cur = match cur {
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .with_context(|| format!("override {key}: {part:?} is not an array index"))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .with_context(|| format!("override {key}: index {idx} out of range (length {len})"))?
            }
            Value::Object(map) => map.entry(part.to_string()).or_insert(Value::Null),
            _ => bail!("override {key}: {} is not an object", parts[..i].join(".")),
        };
        if last {
            *cur = value;
            return Ok(());
        }
    }
    unreachable!("key has at least one part")
}

/// Copies the default of the first list along `key` that `raw` lacks, so
/// `--models.0.hidden_size` edits the default model list.
fn fill_from_defaults(raw: &mut Value, defaults: &Value, key: &str) {
    let mut cur = raw;
    let mut def = defaults;
    for part in key.split('.') {
        let next_def = match def {
            Value::Object(m) => m.get(part),
            Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get(i)),
            _ => None,
        };
        let Some(next_def) = next_def else { return };
        let present = match &*cur {
            Value::Object(m) => m.get(part).is_some_and(|v| !v.is_null()),
            Value::Array(a) => part.parse::<usize>().ok().is_some_and(|i| i < a.len()),
            _ => return,
        };
        if !present {
            if let (Value::Object(m), Value::Array(_)) = (cur, next_def) {
                m.insert(part.to_string(), next_def.clone());
            }
            return;
        }
        cur = match cur {
            Value::Object(m) => m.get_mut(part).expect("present"),
            Value::Array(a) => &mut a[part.parse::<usize>().expect("index")],
            _ => return,
        };
        def = next_def;
    }
}

/// Global seed: the config's (after overrides), else `EHRSEQ_SEED`, else 2021.
pub fn resolve_seed(config_seed: Option<u64>, env: Option<&str>) -> anyhow::Result<u64> {
    if let Some(s) = config_seed {
        return Ok(s);
    }
    match env {
        Some(text) => text
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={text:?} is not an unsigned integer")),
        None => Ok(DEFAULT_SEED),
    }
}

fn lookup<'a>(value: &'a Value, path: &[&str]) -> Option<&'a Value> {
    path.iter().try_fold(value, |v, k| match v {
        Value::Array(a) => k.parse::<usize>().ok().and_then(|i| a.get(i)),
        _ => v.get(k),
    })
}

/// Whether the user set `path`, in the file or through an override of it
/// or of an enclosing section.
fn explicit(raw: &Value, overrides: &[(String, Value)], path: &[&str]) -> bool {
    let set = |v: &Value, p: &[&str]| lookup(v, p).is_some_and(|x| !x.is_null());
    set(raw, path)
        || overrides.iter().any(|(k, v)| {
            let kp: Vec<&str> = k.split('.').collect();
            kp.len() <= path.len() && kp[..] == path[..kp.len()] && set(v, &path[kp.len()..])
        })
}

impl RunConfig {
    /// Builds a config from raw JSON and `(dotted key, value)` overrides.
    pub fn from_value(mut raw: Value, overrides: &[(String, Value)], env_seed: Option<&str>) -> anyhow::Result<Loaded> {
        if raw.is_null() {
            raw = Value::Object(Default::default());
        }
        if !raw.is_object() {
            bail!("config must be a JSON object");
        }
        let user = raw.clone();
        let defaults = serde_json::to_value(RunConfig::default()).expect("config serializes");
        for (k, v) in overrides {
            fill_from_defaults(&mut raw, &defaults, k);
            set_dotted(&mut raw, k, v.clone())?;
        }
        let mut unknown = Vec::new();
        prune(&mut raw, &template(), "", &mut unknown);
        let warnings: Vec<String> = unknown.iter().map(|k| format!("unknown config field {k} ignored")).collect();
        let generator_seed = explicit(&user, overrides, &["generator", "seed"]);
        let split_seed = explicit(&user, overrides, &["split", "seed"]);
        let mut config: RunConfig = serde_json::from_value(raw).context("config does not match the schema")?;
        let seed = resolve_seed(config.seed, env_seed)?;
        if !generator_seed {
            config.generator.seed = seed;
        }
        if !split_seed {
            config.split.seed = seed;
        }
        for (i, m) in config.models.iter_mut().enumerate() {
            if !explicit(&user, overrides, &["models", &i.to_string(), "seed"]) {
                m.seed = seed;
            }
        }
        if config.experiments.seeds.is_empty() {
            config.experiments.seeds = (0..config.experiments.n_seeds as u64).map(|k| seed + k).collect();
        }
        Ok(Loaded {
            config,
            seed,
            warnings,
        })
    }

    pub fn load(path: &Path, overrides: &[(String, Value)], env_seed: Option<&str>) -> anyhow::Result<Loaded> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let raw: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        RunConfig::from_value(raw, overrides, env_seed)
    }

    /// Cohort rules in force: the rules file, else `rules`, else the
    /// generator's.
    pub fn cohort_rules(&self) -> anyhow::Result<CohortRules> {
        if let Some(p) = &self.paths.rules {
            return CohortRules::load(p).with_context(|| format!("loading rules {}", p.display()));
        }
        Ok(self.rules.clone().unwrap_or_else(|| self.generator.cohort_rules()))
    }

    pub fn model_labels(&self) -> Vec<String> {
        self.models.iter().map(model_label).collect()
    }

    /// Models whose labels are in `names`; every model when `names` is empty.
    pub fn select_models(&self, names: &[String]) -> Vec<ModelConfig> {
        self.models
            .iter()
            .filter(|m| names.is_empty() || names.contains(&model_label(m)))
            .cloned()
            .collect()
    }

    pub fn ablation_subsets(&self) -> Vec<ModalitySet> {
        if self.experiments.ablation_subsets.is_empty() {
            ModalitySet::all_subsets()
        } else {
            self.experiments.ablation_subsets.clone()
        }
    }

    /// Every violated invariant, across all sections.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        v.extend(self.generator.violations());
        match self.cohort_rules() {
            Ok(r) => v.extend(r.violations()),
            Err(e) => v.push(format!("{e:#}")),
        }
        v.extend(self.corpus.violations());
        v.extend(self.split.violations());
        if let Some(p) = &self.paths.events {
            if !p.is_file() {
                v.push(format!("paths.events: {} does not exist", p.display()));
            }
        }
        if self.paths.out_dir.as_os_str().is_empty() {
            v.push("paths.out_dir must not be empty".into());
        }
        if self.models.is_empty() {
            v.push("models must list at least one model".into());
        }
        for (i, m) in self.models.iter().enumerate() {
            v.extend(m.violations(self.corpus.max_len).into_iter().map(|e| format!("models.{i}: {e}")));
        }
        let labels = self.model_labels();
        let mut seen = BTreeSet::new();
        for l in &labels {
            if !seen.insert(l) {
                v.push(format!("models: label {l:?} appears more than once"));
            }
        }
        let e = &self.experiments;
        if e.tasks.is_empty() {
            v.push("experiments.tasks must not be empty".into());
        }
        if e.seeds.is_empty() {
            v.push("experiments: no seeds (set seeds or n_seeds > 0)".into());
        }
        let unique: BTreeSet<&u64> = e.seeds.iter().collect();
        if unique.len() != e.seeds.len() {
            v.push("experiments.seeds contains duplicates".into());
        }
        if e.sweep_sizes.iter().any(|&s| s < 2) {
            v.push("experiments.sweep_sizes must all be at least 2".into());
        }
        for (field, names) in [("sweep_models", &e.sweep_models), ("ablation_models", &e.ablation_models)] {
            for n in names {
                if !labels.contains(n) {
                    v.push(format!("experiments.{field}: no model labeled {n:?} (have {labels:?})"));
                }
            }
        }
        if e.ablation_subsets.iter().any(|s| s.is_empty()) {
            v.push("experiments.ablation_subsets must be non-empty sets".into());
        }
        if self.jobs == Some(0) {
            v.push("jobs must be at least 1".into());
        }
        v
    }
}
