//! From labeled event streams to model inputs.
//!
//! `encode` runs, per patient: task window, modality filter, visit grouping,
//! flattening, tokenization, and truncation to the most recent `max_len`
//! tokens. Sequences carry no padding and no `[CLS]`; models add both at
//! batch time (padding on the left, so the last position is always the most
//! recent code). A patient with nothing left after filtering is kept as a
//! single `[PAD]`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::cohort::{CohortLabel, Status};
use crate::error::{Error, Result};
use crate::eventstore::{Day, Domain, PatientStream};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const MASK: u32 = 3;
pub const NUM_SPECIAL: u32 = 4;
pub const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]"];
pub const DEFAULT_MAX_LEN: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detection,
    Prediction,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Detection => "detection",
            Task::Prediction => "prediction",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "detection" => Ok(Task::Detection),
            "prediction" => Ok(Task::Prediction),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

/// A non-empty subset of the three record domains.
///
/// Written as `+`-joined short names in procedure, diagnosis, prescription
/// order (`proc+diag+pres`); `all` is accepted on input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const ALL: ModalitySet = ModalitySet(0b111);

    pub fn of(domains: &[Domain]) -> ModalitySet {
        ModalitySet(domains.iter().fold(0, |acc, d| acc | Self::bit(*d)))
    }

    fn bit(d: Domain) -> u8 {
        match d {
            Domain::Procedure => 1,
            Domain::Diagnosis => 2,
            Domain::Prescription => 4,
        }
    }

    pub fn contains(self, d: Domain) -> bool {
        self.0 & Self::bit(d) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// The seven non-empty subsets: all three, each single domain, then the
    /// pairs.
    pub fn all_subsets() -> Vec<ModalitySet> {
        use Domain::*;
        vec![
            ModalitySet::ALL,
            ModalitySet::of(&[Procedure]),
            ModalitySet::of(&[Diagnosis]),
            ModalitySet::of(&[Prescription]),
            ModalitySet::of(&[Procedure, Diagnosis]),
            ModalitySet::of(&[Diagnosis, Prescription]),
            ModalitySet::of(&[Procedure, Prescription]),
        ]
    }
}

impl Default for ModalitySet {
    fn default() -> Self {
        ModalitySet::ALL
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (Domain::Procedure, "proc"),
            (Domain::Diagnosis, "diag"),
            (Domain::Prescription, "pres"),
        ]
        .iter()
        .filter(|(d, _)| self.contains(*d))
        .map(|(_, n)| *n)
        .collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for ModalitySet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "all" {
            return Ok(ModalitySet::ALL);
        }
        let mut set = ModalitySet(0);
        for part in s.split('+') {
            let d = match part {
                "proc" | "procedure" => Domain::Procedure,
                "diag" | "diagnosis" => Domain::Diagnosis,
                "pres" | "prescription" => Domain::Prescription,
                other => return Err(format!("unknown modality {other:?}")),
            };
            set.0 |= Self::bit(d);
        }
        Ok(set)
    }
}

impl Serialize for ModalitySet {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModalitySet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(deserializer)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Code string ↔ token id. Ids `0..4` are the special tokens; code `i` of
/// [`Vocabulary::codes`] has id `i + 4`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    codes: Vec<String>,
    index: HashMap<String, u32>,
    pub min_frequency: usize,
    pub modalities: ModalitySet,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    specials: Vec<String>,
    codes: Vec<String>,
    min_frequency: usize,
    modalities: ModalitySet,
}

impl Vocabulary {
    pub fn from_codes(codes: Vec<String>, min_frequency: usize, modalities: ModalitySet) -> Result<Vocabulary> {
        let mut index = HashMap::with_capacity(codes.len());
        for (i, code) in codes.iter().enumerate() {
            if index.insert(code.clone(), i as u32 + NUM_SPECIAL).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary code {code:?}")));
            }
        }
        Ok(Vocabulary {
            codes,
            index,
            min_frequency,
            modalities,
        })
    }

    /// Number of ids, special tokens included.
    pub fn size(&self) -> usize {
        self.codes.len() + NUM_SPECIAL as usize
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn id(&self, code: &str) -> u32 {
        self.index.get(code).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        if id < NUM_SPECIAL {
            Some(SPECIAL_TOKENS[id as usize])
        } else {
            self.codes.get((id - NUM_SPECIAL) as usize).map(String::as_str)
        }
    }

    /// Hex SHA-256 over the ordered code list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for code in &self.codes {
            h.update(code.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabularyFile {
            specials: SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
            codes: self.codes.clone(),
            min_frequency: self.min_frequency,
            modalities: self.modalities,
        };
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabularyFile = serde_json::from_str(&text)?;
        if file.specials != SPECIAL_TOKENS {
            return Err(Error::Schema(format!("{}: unexpected special tokens", path.display())));
        }
        Vocabulary::from_codes(file.codes, file.min_frequency, file.modalities)
    }
}

/// Builds a vocabulary over the codes of the selected domains.
///
/// Ids are assigned by descending frequency, ties broken by code string.
pub fn build_vocab(streams: &[PatientStream], modalities: ModalitySet, min_frequency: usize) -> Result<Vocabulary> {
    if streams.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let counts = streams
        .par_iter()
        .fold(HashMap::<&str, usize>::new, |mut acc, s| {
            for e in s.events.iter().filter(|e| modalities.contains(e.domain)) {
                *acc.entry(e.code.as_str()).or_default() += 1;
            }
            acc
        })
        .reduce(HashMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_default() += v;
            }
            a
        });
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|(_, n)| *n >= min_frequency.max(1)).collect();
    if kept.is_empty() {
        return Err(Error::Data(format!(
            "no {modalities} code reaches min_frequency {min_frequency}"
        )));
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_codes(
        kept.into_iter().map(|(c, _)| c.to_string()).collect(),
        min_frequency,
        modalities,
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Visit {
    pub date: Day,
    pub codes: Vec<String>,
}

/// Groups a sorted stream into one visit per distinct date.
pub fn assemble_visits(stream: &PatientStream) -> Vec<Visit> {
    let mut visits: Vec<Visit> = Vec::new();
    for e in &stream.events {
        match visits.last_mut() {
            Some(v) if v.date == e.date => v.codes.push(e.code.clone()),
            _ => visits.push(Visit {
                date: e.date,
                codes: vec![e.code.clone()],
            }),
        }
    }
    visits
}

pub fn flatten(visits: &[Visit]) -> Vec<String> {
    visits.iter().flat_map(|v| v.codes.iter().cloned()).collect()
}

/// Restricts a stream to what a task may see: strictly before the index
/// date for prediction, up to and including index + 365 days for detection.
pub fn window(stream: &PatientStream, label: &CohortLabel, task: Task) -> Result<PatientStream> {
    if !label.status.is_labeled() {
        return Err(Error::Data(format!(
            "{} is {}, only cases and controls can be windowed",
            label.patient_id,
            label.status.as_str()
        )));
    }
    let index = label
        .index_date
        .ok_or_else(|| Error::Data(format!("{} has no index date", label.patient_id)))?;
    let keep = |d: Day| match task {
        Task::Prediction => d < index,
        Task::Detection => d <= index.offset(365),
    };
    Ok(PatientStream {
        patient_id: stream.patient_id.clone(),
        events: stream.events.iter().filter(|e| keep(e.date)).cloned().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSequence {
    pub patient_id: String,
    pub task: Task,
    pub label: u8,
    pub token_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSettings {
    pub max_len: usize,
    pub min_frequency: usize,
    pub modalities: ModalitySet,
    /// Drop treatment-failure codes from model inputs. Off by default: the
    /// detection window then contains the outcome events themselves.
    pub mask_outcome_codes: bool,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        CorpusSettings {
            max_len: DEFAULT_MAX_LEN,
            min_frequency: 1,
            modalities: ModalitySet::ALL,
            mask_outcome_codes: false,
        }
    }
}

impl CorpusSettings {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.max_len == 0 {
            v.push("corpus.max_len must be positive".into());
        }
        if self.modalities.is_empty() {
            v.push("corpus.modalities must not be empty".into());
        }
        v
    }
}

fn tokenize(stream: &PatientStream, vocab: &Vocabulary, modalities: ModalitySet, max_len: usize, masked: &BTreeSet<String>) -> Vec<u32> {
    let filtered = PatientStream {
        patient_id: stream.patient_id.clone(),
        events: stream
            .events
            .iter()
            .filter(|e| modalities.contains(e.domain) && !masked.contains(&e.code))
            .cloned()
            .collect(),
    };
    let codes = flatten(&assemble_visits(&filtered));
    let start = codes.len().saturating_sub(max_len);
    let ids: Vec<u32> = codes[start..].iter().map(|c| vocab.id(c)).collect();
    if ids.is_empty() {
        vec![PAD]
    } else {
        ids
    }
}

/// Encodes one labeled patient for a task.
pub fn encode(
    stream: &PatientStream,
    label: &CohortLabel,
    task: Task,
    vocab: &Vocabulary,
    modalities: ModalitySet,
    max_len: usize,
) -> Result<CodeSequence> {
    encode_masked(stream, label, task, vocab, modalities, max_len, &BTreeSet::new())
}

/// [`encode`], additionally dropping every code in `masked`.
pub fn encode_masked(
    stream: &PatientStream,
    label: &CohortLabel,
    task: Task,
    vocab: &Vocabulary,
    modalities: ModalitySet,
    max_len: usize,
    masked: &BTreeSet<String>,
) -> Result<CodeSequence> {
    let windowed = window(stream, label, task)?;
    Ok(CodeSequence {
        patient_id: stream.patient_id.clone(),
        task,
        label: u8::from(label.status == Status::Case),
        token_ids: tokenize(&windowed, vocab, modalities, max_len, masked),
    })
}

/// Whole-history encoding for unlabeled (pre-training) patients.
pub fn encode_unlabeled(stream: &PatientStream, vocab: &Vocabulary, modalities: ModalitySet, max_len: usize) -> Vec<u32> {
    tokenize(stream, vocab, modalities, max_len, &BTreeSet::new())
}

/// Encodes every case and control in `labels` order; other statuses are
/// skipped. Labels without a matching stream are an error.
pub fn encode_cohort(
    streams: &[PatientStream],
    labels: &[CohortLabel],
    task: Task,
    vocab: &Vocabulary,
    settings: &CorpusSettings,
    masked: &BTreeSet<String>,
) -> Result<Vec<CodeSequence>> {
    let by_id: HashMap<&str, &PatientStream> = streams.iter().map(|s| (s.patient_id.as_str(), s)).collect();
    labels
        .par_iter()
        .filter(|l| l.status.is_labeled())
        .map(|l| {
            let stream = by_id
                .get(l.patient_id.as_str())
                .ok_or_else(|| Error::Data(format!("label for unknown patient {}", l.patient_id)))?;
            encode_masked(stream, l, task, vocab, settings.modalities, settings.max_len, masked)
        })
        .collect()
}

/// Whole-history sequences of patients labeled `not_in_cohort`, the
/// pre-training pool.
pub fn encode_unlabeled_pool(
    streams: &[PatientStream],
    labels: &[CohortLabel],
    vocab: &Vocabulary,
    settings: &CorpusSettings,
) -> Vec<(String, Vec<u32>)> {
    let pool: BTreeSet<&str> = labels
        .iter()
        .filter(|l| l.status == Status::NotInCohort)
        .map(|l| l.patient_id.as_str())
        .collect();
    streams
        .iter()
        .filter(|s| pool.contains(s.patient_id.as_str()))
        .map(|s| {
            (
                s.patient_id.clone(),
                encode_unlabeled(s, vocab, settings.modalities, settings.max_len),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub seed: u64,
    pub test_fraction: f64,
    /// Share of the non-test patients held out for validation.
    pub validation_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            seed: 2021,
            test_fraction: 0.2,
            validation_fraction: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, f) in [("test_fraction", self.test_fraction), ("validation_fraction", self.validation_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                v.push(format!("split.{name} = {f} must be in (0, 1)"));
            }
        }
        v
    }
}

/// Patient-id membership of the three partitions, each sorted by id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Per-patient sort key: first 8 bytes of SHA-256(seed_le || tag || id).
pub(crate) fn keyed_hash(seed: u64, tag: &[u8], id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag);
    h.update(id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl Split {
    /// Hex SHA-256 of the sorted test ids.
    pub fn test_hash(&self) -> String {
        ids_hash(&self.test)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Split> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn ids_hash(ids: &[String]) -> String {
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    let mut h = Sha256::new();
    for id in sorted {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Splits patients into train/validation/test.
///
/// Patients are ranked by a seeded hash of their id; the first
/// `round(test_fraction * n)` form the test set, the next
/// `round(validation_fraction * rest)` the validation set. A patient's rank
/// depends only on the seed and its id, so every task and modality subset
/// over the same cohort gets the same test set.
pub fn split(patient_ids: &[String], spec: &SplitSpec) -> Result<Split> {
    let unique: BTreeSet<&String> = patient_ids.iter().collect();
    if unique.len() < 5 {
        return Err(Error::Data(format!("need at least 5 patients to split, got {}", unique.len())));
    }
    if unique.len() != patient_ids.len() {
        return Err(Error::Data("duplicate patient ids in split input".into()));
    }
    let mut ranked: Vec<(u64, &String)> = unique.into_iter().map(|id| (keyed_hash(spec.seed, b"split", id), id)).collect();
    ranked.sort();
    let n = ranked.len();
    let n_test = ((spec.test_fraction * n as f64).round() as usize).clamp(1, n - 2);
    let n_val = ((spec.validation_fraction * (n - n_test) as f64).round() as usize).clamp(1, n - n_test - 1);
    let take = |range: std::ops::Range<usize>| {
        let mut ids: Vec<String> = ranked[range].iter().map(|(_, id)| (*id).clone()).collect();
        ids.sort();
        ids
    };
    Ok(Split {
        test: take(0..n_test),
        validation: take(n_test..n_test + n_val),
        train: take(n_test + n_val..n),
    })
}

/// Dense token-count matrix, one row per sequence, one column per token id.
#[derive(Debug, Clone, PartialEq)]
pub struct BowMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl BowMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn from_rows(rows: Vec<Vec<f32>>) -> Result<BowMatrix> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Data("ragged bag-of-words rows".into()));
        }
        Ok(BowMatrix {
            rows: rows.len(),
            cols,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn select(&self, rows: &[usize]) -> BowMatrix {
        BowMatrix {
            rows: rows.len(),
            cols: self.cols,
            data: rows.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
        }
    }
}

/// Counts tokens per sequence; `[PAD]` is never counted.
pub fn bag_of_words<S: AsRef<[u32]>>(sequences: &[S], vocab_size: usize) -> BowMatrix {
    let mut data = vec![0f32; sequences.len() * vocab_size];
    for (i, seq) in sequences.iter().enumerate() {
        let row = &mut data[i * vocab_size..(i + 1) * vocab_size];
        for &t in seq.as_ref() {
            if t != PAD && (t as usize) < vocab_size {
                row[t as usize] += 1.0;
            }
        }
    }
    BowMatrix {
        rows: sequences.len(),
        cols: vocab_size,
        data,
    }
}

impl AsRef<[u32]> for CodeSequence {
    fn as_ref(&self) -> &[u32] {
        &self.token_ids
    }
}

pub fn write_sequences(sequences: &[CodeSequence], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in sequences {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sequences(path: &Path) -> Result<Vec<CodeSequence>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: CodeSequence = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.push(seq);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventstore::{CodeSystem, EventRecord};

    fn ev(day: i32, domain: Domain, code: &str) -> EventRecord {
        EventRecord {
            patient_id: "p".into(),
            date: Day(day),
            domain,
            system: match domain {
                Domain::Diagnosis => CodeSystem::ICD10,
                Domain::Procedure => CodeSystem::OPCS4,
                Domain::Prescription => CodeSystem::BNF,
            },
            code: code.into(),
            emergency_admission: false,
            source_tag: String::new(),
        }
    }

    fn control(index: i32) -> CohortLabel {
        CohortLabel {
            patient_id: "p".into(),
            status: Status::Control,
            index_date: Some(Day(index)),
            first_event_date: None,
            exclusion_reason: None,
            diagnostic: None,
        }
    }

    #[test]
    fn visits_group_by_date() {
        let s = PatientStream::new(
            "p",
            vec![ev(5, Domain::Diagnosis, "a"), ev(5, Domain::Diagnosis, "b"), ev(9, Domain::Diagnosis, "c")],
        );
        let v = assemble_visits(&s);
        assert_eq!(v.iter().map(|v| v.codes.len()).collect::<Vec<_>>(), [2, 1]);
        assert_eq!(flatten(&v), ["a", "b", "c"]);
        assert!(assemble_visits(&PatientStream::new("p", vec![])).is_empty());
        assert!(flatten(&[Visit { date: Day(0), codes: vec![] }]).is_empty());
    }

    #[test]
    fn visit_sizes_conserve_events() {
        let events = (0..1000).map(|i| ev(i % 97, Domain::Diagnosis, "x")).collect();
        let v = assemble_visits(&PatientStream::new("p", events));
        assert_eq!(v.iter().map(|v| v.codes.len()).sum::<usize>(), 1000);
        assert_eq!(v.len(), 97);
    }

    #[test]
    fn windows() {
        let s = PatientStream::new(
            "p",
            [-10, 0, 50, 400].iter().map(|&d| ev(1000 + d, Domain::Diagnosis, &format!("c{d}"))).collect(),
        );
        let codes = |t| -> Vec<String> { window(&s, &control(1000), t).unwrap().events.into_iter().map(|e| e.code).collect() };
        assert_eq!(codes(Task::Prediction), ["c-10"]);
        assert_eq!(codes(Task::Detection), ["c-10", "c0", "c50"]);
        let mut excluded = control(1000);
        excluded.status = Status::Excluded;
        assert!(window(&s, &excluded, Task::Detection).is_err());
        let mut no_index = control(1000);
        no_index.index_date = None;
        assert!(window(&s, &no_index, Task::Detection).is_err());
    }

    #[test]
    fn vocab_frequency_and_order() {
        let s = PatientStream::new(
            "p",
            vec![
                ev(1, Domain::Diagnosis, "x"),
                ev(2, Domain::Diagnosis, "x"),
                ev(3, Domain::Diagnosis, "x"),
                ev(4, Domain::Diagnosis, "y"),
                ev(5, Domain::Prescription, "r"),
                ev(6, Domain::Prescription, "r"),
                ev(7, Domain::Procedure, "q"),
                ev(8, Domain::Procedure, "q"),
            ],
        );
        let v = build_vocab(std::slice::from_ref(&s), ModalitySet::ALL, 2).unwrap();
        assert_eq!(v.codes(), ["x", "q", "r"]);
        assert_eq!(v.id("x"), 4);
        assert_eq!(v.id("y"), UNK);
        assert_eq!(v.token(0), Some("[PAD]"));
        let dx = build_vocab(std::slice::from_ref(&s), ModalitySet::of(&[Domain::Diagnosis]), 1).unwrap();
        assert_eq!(dx.codes(), ["x", "y"]);
        assert_eq!(dx, build_vocab(&[s.clone()], ModalitySet::of(&[Domain::Diagnosis]), 1).unwrap());
        assert!(build_vocab(&[s], ModalitySet::ALL, 10).is_err());
        assert!(build_vocab(&[], ModalitySet::ALL, 1).is_err());
    }

    #[test]
    fn encode_truncates_to_most_recent() {
        let events: Vec<_> = (0..600).map(|i| ev(i, Domain::Diagnosis, &format!("c{i}"))).collect();
        let s = PatientStream::new("p", events);
        let vocab = build_vocab(std::slice::from_ref(&s), ModalitySet::ALL, 1).unwrap();
        let seq = encode(&s, &control(10_000), Task::Prediction, &vocab, ModalitySet::ALL, 512).unwrap();
        assert_eq!(seq.token_ids.len(), 512);
        assert_eq!(seq.token_ids[0], vocab.id("c88"));
        assert_eq!(*seq.token_ids.last().unwrap(), vocab.id("c599"));
    }

    #[test]
    fn unknown_codes_and_empty_modalities() {
        let s = PatientStream::new("p", vec![ev(1, Domain::Diagnosis, "a"), ev(2, Domain::Diagnosis, "zz")]);
        let vocab = Vocabulary::from_codes(vec!["a".into()], 1, ModalitySet::ALL).unwrap();
        let seq = encode(&s, &control(100), Task::Prediction, &vocab, ModalitySet::ALL, 512).unwrap();
        assert_eq!(seq.token_ids, [4, UNK]);
        let pres = ModalitySet::of(&[Domain::Prescription]);
        let seq = encode(&s, &control(100), Task::Prediction, &vocab, pres, 512).unwrap();
        assert_eq!(seq.token_ids, [PAD]);
        let seq = encode(&s, &control(0), Task::Prediction, &vocab, ModalitySet::ALL, 512).unwrap();
        assert_eq!(seq.token_ids, [PAD]);
    }

    #[test]
    fn modality_names() {
        let all: Vec<String> = ModalitySet::all_subsets().iter().map(|m| m.to_string()).collect();
        assert_eq!(all, ["proc+diag+pres", "proc", "diag", "pres", "proc+diag", "diag+pres", "proc+pres"]);
        assert_eq!("all".parse::<ModalitySet>().unwrap(), ModalitySet::ALL);
        assert_eq!("pres+diag".parse::<ModalitySet>().unwrap().to_string(), "diag+pres");
        assert!("lab".parse::<ModalitySet>().is_err());
    }

    #[test]
    fn split_sizes_and_laws() {
        let ids: Vec<String> = (0..100).map(|i| format!("P{i:03}")).collect();
        let spec = SplitSpec::default();
        let s = split(&ids, &spec).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (64, 16, 20));
        assert_eq!(s, split(&ids, &spec).unwrap());
        let train: BTreeSet<_> = s.train.iter().collect();
        assert!(s.test.iter().all(|t| !train.contains(t)));
        assert!(s.validation.iter().all(|t| !train.contains(t)));
        let other = split(&ids, &SplitSpec { seed: 9, ..spec.clone() }).unwrap();
        assert_ne!(s.test, other.test);
        let mut reversed = ids.clone();
        reversed.reverse();
        assert_eq!(split(&reversed, &spec).unwrap(), s);
        assert!(split(&ids[..4], &spec).is_err());
    }

    #[test]
    fn bag_of_words_counts() {
        let m = bag_of_words(&[vec![5u32, 5, 6], vec![PAD], vec![4, UNK, 4]], 8);
        assert_eq!(m.row(0), [0., 0., 0., 0., 0., 2., 1., 0.]);
        assert!(m.row(1).iter().all(|&c| c == 0.0));
        assert_eq!(m.row(2).iter().sum::<f32>(), 3.0);
    }

    #[test]
    fn sequences_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.jsonl");
        let seqs = vec![CodeSequence {
            patient_id: "p".into(),
            task: Task::Detection,
            label: 1,
            token_ids: vec![4, 5, 1],
        }];
        write_sequences(&seqs, &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "{\"patient_id\":\"p\",\"task\":\"detection\",\"label\":1,\"token_ids\":[4,5,1]}\n"
        );
        assert_eq!(read_sequences(&path).unwrap(), seqs);
    }
}
