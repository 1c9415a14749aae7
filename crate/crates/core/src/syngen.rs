//! Seeded synthetic cohort generator with planted, known structure.
//!
//! Every patient gets a background history: a negative-binomial number of
//! visits (truncated to `[1, 2805]`), each with `1 + Poisson` codes
//! (truncated to `[1, 61]`) drawn from Zipf-weighted per-domain code lists.
//! On top of that the generator plants:
//!
//! * an index-drug prescription for a `index_drug_fraction` share of
//!   patients, with repeat prescriptions during the following year;
//! * for would-be cases, an emergency treatment-failure diagnosis (and
//!   sometimes a same-day procedure marker) in `(index+7, index+365]`, or in
//!   `[index, index+7]` for the `early_event_rate` share;
//! * for controls, occasional non-emergency marker follow-ups inside the
//!   year and emergency events after it;
//! * prior marker events before the index date for anyone;
//! * an ordered pair of risk codes before the index date: first code (a
//!   prescription) then second code (a diagnosis), or the reverse. Cases
//!   carry the first-then-second order with probability
//!   `(1 + order_signal_strength) / 2`, controls with
//!   `(1 - order_signal_strength) / 2`. The pair's code counts are identical
//!   for every carrier, so only the order is informative.
//!
//! Patient `i` draws from ChaCha8 stream `i` of `seed` (see [`crate::rng`]),
//! so output is a pure function of the config and independent of thread
//! scheduling.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortRules, ExclusionReason, Status};
use crate::error::{Error, Result};
use crate::eventstore::{CodeSystem, Day, Domain, EventRecord, PatientStream};
use crate::rng::{StreamRng, Table};

pub const MAX_VISITS: usize = 2805;
pub const MAX_CODES_PER_VISIT: usize = 61;
const DOMAIN_WEIGHTS: [f64; 3] = [0.30, 0.10, 0.60];
const REPEAT_PRESCRIPTION_RATE: f64 = 0.5;
const LATE_EVENT_RATE: f64 = 0.1;
const PROCEDURE_MARKER_RATE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub n_patients: usize,
    /// Size of each domain's code list, reserved codes included.
    pub n_diagnosis_codes: usize,
    pub n_procedure_codes: usize,
    pub n_prescription_codes: usize,
    pub mean_visits_per_patient: f64,
    /// Negative-binomial shape of the visit-count distribution.
    pub visit_count_shape: f64,
    pub mean_codes_per_visit: f64,
    pub index_drug_code: String,
    /// Diagnosis codes that mark a treatment-failure event.
    pub tf_marker_codes: Vec<String>,
    /// Procedure codes recorded alongside some treatment-failure events.
    pub tf_procedure_codes: Vec<String>,
    /// Prescription code that opens the risk pattern.
    pub pattern_first_code: String,
    /// Diagnosis code that closes the risk pattern.
    pub pattern_second_code: String,
    pub index_drug_fraction: f64,
    /// Share of cases among labeled (case + control) patients.
    pub case_prevalence: f64,
    pub order_signal_strength: f64,
    pub pattern_carrier_rate: f64,
    pub early_event_rate: f64,
    pub followup_rate: f64,
    pub prior_event_rate: f64,
    /// Share of index-drug patients given a contradictory record.
    pub inconsistent_rate: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 2021,
            n_patients: 5000,
            n_diagnosis_codes: 400,
            n_procedure_codes: 150,
            n_prescription_codes: 300,
            mean_visits_per_patient: 58.3,
            visit_count_shape: 0.2,
            mean_codes_per_visit: 2.7,
            index_drug_code: "CLOPIDOGREL".into(),
            tf_marker_codes: vec!["TF_MI".into(), "TF_ISCH_STROKE".into(), "TF_STENT_THROMB".into()],
            tf_procedure_codes: vec!["TF_RESTENT".into()],
            pattern_first_code: "RISK_RX".into(),
            pattern_second_code: "RISK_DX".into(),
            index_drug_fraction: 0.75,
            case_prevalence: 0.21,
            order_signal_strength: 0.6,
            pattern_carrier_rate: 1.0,
            early_event_rate: 0.05,
            followup_rate: 0.15,
            prior_event_rate: 0.3,
            inconsistent_rate: 0.0,
        }
    }
}

impl GenConfig {
    /// Every violated constraint, empty when the config is usable.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let rates = [
            ("index_drug_fraction", self.index_drug_fraction),
            ("case_prevalence", self.case_prevalence),
            ("order_signal_strength", self.order_signal_strength),
            ("pattern_carrier_rate", self.pattern_carrier_rate),
            ("early_event_rate", self.early_event_rate),
            ("followup_rate", self.followup_rate),
            ("prior_event_rate", self.prior_event_rate),
            ("inconsistent_rate", self.inconsistent_rate),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                v.push(format!("gen.{name} = {r} is outside [0, 1]"));
            }
        }
        if self.n_patients < 1 {
            v.push("gen.n_patients must be at least 1".into());
        }
        if !(self.mean_visits_per_patient >= 1.0 && self.mean_visits_per_patient < MAX_VISITS as f64) {
            v.push(format!("gen.mean_visits_per_patient must be in [1, {MAX_VISITS})"));
        }
        if !(self.mean_codes_per_visit >= 1.0 && self.mean_codes_per_visit < MAX_CODES_PER_VISIT as f64) {
            v.push(format!("gen.mean_codes_per_visit must be in [1, {MAX_CODES_PER_VISIT})"));
        }
        if self.visit_count_shape.is_nan() || self.visit_count_shape <= 0.0 {
            v.push("gen.visit_count_shape must be positive".into());
        }
        if self.tf_marker_codes.is_empty() {
            v.push("gen.tf_marker_codes must not be empty".into());
        }
        let reserved = self.reserved_codes();
        let mut seen = BTreeSet::new();
        for code in &reserved {
            if code.is_empty() || code.chars().any(|c| c.is_whitespace() || c == ',') {
                v.push(format!("reserved code {code:?} is empty or contains whitespace/commas"));
            }
            if !seen.insert(code.as_str()) {
                v.push(format!("reserved code {code:?} is used twice"));
            }
            if background_like(code) {
                v.push(format!("reserved code {code:?} collides with generated background codes"));
            }
        }
        let reserved_dx = self.tf_marker_codes.len() + 1;
        let reserved_px = self.tf_procedure_codes.len();
        let reserved_rx = 2;
        for (name, size, taken) in [
            ("n_diagnosis_codes", self.n_diagnosis_codes, reserved_dx),
            ("n_procedure_codes", self.n_procedure_codes, reserved_px),
            ("n_prescription_codes", self.n_prescription_codes, reserved_rx),
        ] {
            if size <= taken {
                v.push(format!(
                    "gen.{name} = {size} leaves no background codes after {taken} reserved code(s)"
                ));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    fn reserved_codes(&self) -> Vec<String> {
        let mut codes = vec![
            self.index_drug_code.clone(),
            self.pattern_first_code.clone(),
            self.pattern_second_code.clone(),
        ];
        codes.extend(self.tf_marker_codes.iter().cloned());
        codes.extend(self.tf_procedure_codes.iter().cloned());
        codes
    }

    /// Probability that an index-drug patient is a would-be case, chosen so
    /// that cases make up `case_prevalence` of case + control patients once
    /// early events are excluded.
    pub fn would_be_case_probability(&self) -> f64 {
        let (p, e) = (self.case_prevalence, self.early_event_rate);
        let denom = 1.0 - e + p * e;
        if denom <= 0.0 {
            0.0
        } else {
            p / denom
        }
    }

    /// Cohort rules matching the codes this config plants.
    pub fn cohort_rules(&self) -> CohortRules {
        CohortRules {
            index_drug_codes: [self.index_drug_code.clone()].into_iter().collect(),
            tf_event_codes: self
                .tf_marker_codes
                .iter()
                .chain(&self.tf_procedure_codes)
                .cloned()
                .collect(),
            ..CohortRules::default()
        }
    }

    fn background_counts(&self) -> [usize; 3] {
        [
            self.n_diagnosis_codes - self.tf_marker_codes.len() - 1,
            self.n_procedure_codes - self.tf_procedure_codes.len(),
            self.n_prescription_codes - 2,
        ]
    }
}

fn background_like(code: &str) -> bool {
    let mut chars = code.chars();
    matches!(chars.next(), Some('D' | 'P' | 'R'))
        && code.len() == 5
        && chars.all(|c| c.is_ascii_digit())
}

fn background_code(domain: Domain, idx: usize) -> String {
    let prefix = match domain {
        Domain::Diagnosis => 'D',
        Domain::Procedure => 'P',
        Domain::Prescription => 'R',
    };
    format!("{prefix}{idx:04}")
}

/// What the generator intended for one patient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub patient_id: String,
    pub intended_label: Status,
    pub exclusion_reason: Option<ExclusionReason>,
    pub index_date: Option<Day>,
    pub event_date: Option<Day>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub streams: Vec<PatientStream>,
    pub truth: Vec<GroundTruth>,
}

struct Planned {
    domain: Domain,
    code: String,
    emergency: bool,
}

struct Visit {
    date: Day,
    codes: Vec<Planned>,
}

struct Sampler {
    visits: Table,
    codes_per_visit: Table,
    domains: Table,
    codes: [Table; 3],
    would_be_case: f64,
}

impl Sampler {
    fn new(config: &GenConfig) -> Self {
        let target = config.mean_visits_per_patient;
        let shape = config.visit_count_shape;
        // The zero-truncation raises the mean, so solve for the untruncated
        // mean that lands the truncated table on target.
        let (mut lo, mut hi) = (1e-6, target);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if Table::negative_binomial(mid, shape, 1, MAX_VISITS).mean() < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let [dx, px, rx] = config.background_counts();
        Sampler {
            visits: Table::negative_binomial(0.5 * (lo + hi), shape, 1, MAX_VISITS),
            codes_per_visit: Table::shifted_poisson(config.mean_codes_per_visit - 1.0, 1, MAX_CODES_PER_VISIT),
            domains: Table::from_weights(0, &DOMAIN_WEIGHTS),
            codes: [Table::zipf(dx), Table::zipf(px), Table::zipf(rx)],
            would_be_case: config.would_be_case_probability(),
        }
    }

    fn background(&self, rng: &mut StreamRng) -> Planned {
        let d = self.domains.sample(rng);
        let domain = Domain::ALL[d];
        Planned {
            domain,
            code: background_code(domain, self.codes[d].sample(rng)),
            emergency: false,
        }
    }
}

fn insert_on(visits: &mut Vec<Visit>, date: Day, items: Vec<Planned>) {
    match visits.binary_search_by_key(&date, |v| v.date) {
        Ok(i) => visits[i].codes.extend(items),
        Err(i) => visits.insert(i, Visit { date, codes: items }),
    }
}

fn marker_event(config: &GenConfig, rng: &mut StreamRng, emergency: bool) -> Vec<Planned> {
    let dx = &config.tf_marker_codes[rng.below(config.tf_marker_codes.len() as u64) as usize];
    let mut items = vec![Planned {
        domain: Domain::Diagnosis,
        code: dx.clone(),
        emergency,
    }];
    if !config.tf_procedure_codes.is_empty() && rng.chance(PROCEDURE_MARKER_RATE) {
        let px = &config.tf_procedure_codes[rng.below(config.tf_procedure_codes.len() as u64) as usize];
        items.push(Planned {
            domain: Domain::Procedure,
            code: px.clone(),
            emergency,
        });
    }
    items
}

fn generate_patient(config: &GenConfig, sampler: &Sampler, index: usize, width: usize) -> (PatientStream, GroundTruth) {
    let mut rng = StreamRng::new(config.seed, index as u64);
    let patient_id = format!("P{index:0width$}");

    let n = sampler.visits.sample(&mut rng);
    let span = rng.between(3650, 9125);
    let mean_gap = (span / n as i64).max(1);
    let mut date = Day::from_ymd(2000, 1, 1).expect("valid").offset(rng.below(3650) as i32);
    let mut visits = Vec::with_capacity(n + 4);
    for _ in 0..n {
        let k = sampler.codes_per_visit.sample(&mut rng);
        let codes = (0..k).map(|_| sampler.background(&mut rng)).collect();
        visits.push(Visit { date, codes });
        date = date.offset(rng.between(1, 2 * mean_gap - 1) as i32);
    }
    let supplier = if rng.chance(0.5) { CodeSystem::READ } else { CodeSystem::BNF };

    let in_cohort = rng.chance(config.index_drug_fraction);
    let would_be_case = in_cohort && rng.chance(sampler.would_be_case);
    let early = would_be_case && rng.chance(config.early_event_rate);
    let inconsistent = in_cohort && rng.chance(config.inconsistent_rate);

    // Index position: somewhere in the middle half of the history.
    let mut index_pos = if in_cohort {
        let lo = n / 4;
        let hi = (3 * n / 4).max(lo);
        Some(rng.between(lo as i64, hi as i64) as usize)
    } else {
        None
    };

    if rng.chance(config.pattern_carrier_rate) {
        let mut pre = index_pos.unwrap_or(visits.len());
        while pre < 2 {
            let first = visits[0].date;
            visits.insert(
                0,
                Visit {
                    date: first.offset(-(rng.between(1, 60) as i32)),
                    codes: vec![sampler.background(&mut rng)],
                },
            );
            pre += 1;
            index_pos = index_pos.map(|p| p + 1);
        }
        let u = rng.below(pre as u64) as usize;
        let mut v = rng.below(pre as u64 - 1) as usize;
        if v >= u {
            v += 1;
        }
        let (early_pos, late_pos) = (u.min(v), u.max(v));
        let q = match (in_cohort, would_be_case) {
            (false, _) => 0.5,
            (true, true) => 0.5 * (1.0 + config.order_signal_strength),
            (true, false) => 0.5 * (1.0 - config.order_signal_strength),
        };
        let first = Planned {
            domain: Domain::Prescription,
            code: config.pattern_first_code.clone(),
            emergency: false,
        };
        let second = Planned {
            domain: Domain::Diagnosis,
            code: config.pattern_second_code.clone(),
            emergency: false,
        };
        let (a, b) = if rng.chance(q) { (first, second) } else { (second, first) };
        *visits[early_pos].codes.last_mut().expect("visits are non-empty") = a;
        *visits[late_pos].codes.last_mut().expect("visits are non-empty") = b;
    }

    let index_day = index_pos.map(|p| visits[p].date);
    if rng.chance(config.prior_event_rate) {
        let limit = index_pos.unwrap_or(visits.len());
        if limit > 0 {
            let w = rng.below(limit as u64) as usize;
            let items = marker_event(config, &mut rng, true);
            visits[w].codes.extend(items);
        }
    }

    let mut event_date = None;
    if let (Some(pos), Some(index)) = (index_pos, index_day) {
        let drug = || Planned {
            domain: Domain::Prescription,
            code: config.index_drug_code.clone(),
            emergency: false,
        };
        visits[pos].codes[0] = drug();
        for visit in visits.iter_mut().skip(pos + 1) {
            if visit.date.days_since(index) > 365 {
                break;
            }
            if rng.chance(REPEAT_PRESCRIPTION_RATE) {
                visit.codes[0] = drug();
            }
        }
        if would_be_case {
            let offset = if early { rng.between(0, 7) } else { rng.between(8, 365) };
            let day = index.offset(offset as i32);
            event_date = Some(day);
            let items = marker_event(config, &mut rng, true);
            insert_on(&mut visits, day, items);
            if early && rng.chance(0.3) {
                let later = index.offset(rng.between(8, 365) as i32);
                let items = marker_event(config, &mut rng, true);
                insert_on(&mut visits, later, items);
            }
        } else {
            if rng.chance(config.followup_rate) {
                let day = index.offset(rng.between(0, 365) as i32);
                let items = marker_event(config, &mut rng, false);
                insert_on(&mut visits, day, items);
            }
            if rng.chance(LATE_EVENT_RATE) {
                let day = index.offset(rng.between(366, 1000) as i32);
                let items = marker_event(config, &mut rng, true);
                insert_on(&mut visits, day, items);
            }
        }
        if inconsistent {
            insert_on(
                &mut visits,
                index,
                vec![Planned {
                    domain: Domain::Diagnosis,
                    code: config.index_drug_code.clone(),
                    emergency: false,
                }],
            );
        }
    }

    let (intended_label, exclusion_reason) = match (in_cohort, inconsistent, early, would_be_case) {
        (false, ..) => (Status::NotInCohort, None),
        (true, true, ..) => (Status::Excluded, Some(ExclusionReason::DataInconsistent)),
        (true, false, true, _) => (Status::Excluded, Some(ExclusionReason::EarlyEvent)),
        (true, false, false, true) => (Status::Case, None),
        (true, false, false, false) => (Status::Control, None),
    };
    let truth = GroundTruth {
        patient_id: patient_id.clone(),
        intended_label,
        exclusion_reason,
        index_date: index_day,
        event_date: match (intended_label, exclusion_reason) {
            (Status::Case, _) | (Status::Excluded, Some(ExclusionReason::EarlyEvent)) => event_date,
            _ => None,
        },
    };

    let events = visits
        .into_iter()
        .flat_map(|v| {
            let date = v.date;
            let pid = &patient_id;
            v.codes.into_iter().map(move |c| EventRecord {
                patient_id: pid.clone(),
                date,
                domain: c.domain,
                system: match c.domain {
                    Domain::Diagnosis => CodeSystem::ICD10,
                    Domain::Procedure => CodeSystem::OPCS4,
                    Domain::Prescription => supplier,
                },
                code: c.code,
                emergency_admission: c.emergency,
                source_tag: match c.domain {
                    Domain::Prescription => "syn:gp".to_string(),
                    _ => "syn:hes".to_string(),
                },
            })
        })
        .collect();
    (PatientStream::new(patient_id, events), truth)
}

/// Generates `config.n_patients` patients in patient-index order.
pub fn generate(config: &GenConfig) -> Result<Generated> {
    config.validate()?;
    let sampler = Sampler::new(config);
    let width = (config.n_patients.saturating_sub(1)).to_string().len().max(6);
    let (streams, truth) = (0..config.n_patients)
        .into_par_iter()
        .map(|i| generate_patient(config, &sampler, i, width))
        .unzip();
    Ok(Generated { streams, truth })
}

/// Writes one JSON object per patient.
pub fn write_truth(truth: &[GroundTruth], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for t in truth {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Config echo plus the expectations it implies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenManifest {
    pub config: GenConfig,
    pub would_be_case_probability: f64,
    pub expected_labeled_case_fraction: f64,
    pub order_first_code_probability_case: f64,
    pub order_first_code_probability_control: f64,
    pub flags: Vec<String>,
}

pub const FLAG_PREDICTION_AT_CHANCE: &str = "prediction task at chance";

pub fn describe(config: &GenConfig) -> GenManifest {
    let s = config.order_signal_strength;
    let mut flags = Vec::new();
    if s == 0.0 || config.pattern_carrier_rate == 0.0 {
        flags.push(FLAG_PREDICTION_AT_CHANCE.to_string());
    }
    if config.case_prevalence == 0.0 {
        flags.push("no cases planted".to_string());
    }
    if config.index_drug_fraction == 1.0 {
        flags.push("no unlabeled patients for pre-training".to_string());
    }
    GenManifest {
        config: config.clone(),
        would_be_case_probability: config.would_be_case_probability(),
        expected_labeled_case_fraction: config.case_prevalence,
        order_first_code_probability_case: 0.5 * (1.0 + s),
        order_first_code_probability_control: 0.5 * (1.0 - s),
        flags,
    }
}

impl GenManifest {
    pub fn parse(text: &str) -> Result<GenManifest> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventstore::summarize;

    fn small(n: usize) -> GenConfig {
        GenConfig {
            n_patients: n,
            ..GenConfig::default()
        }
    }

    #[test]
    fn truth_round_trips() {
        let g = generate(&small(30)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.jsonl");
        write_truth(&g.truth, &path).unwrap();
        assert_eq!(read_truth(&path).unwrap(), g.truth);
    }

    #[test]
    fn deterministic() {
        let c = small(50);
        assert_eq!(generate(&c).unwrap(), generate(&c).unwrap());
        let other = GenConfig { seed: 7, ..c.clone() };
        assert_ne!(generate(&c).unwrap().streams, generate(&other).unwrap().streams);
    }

    #[test]
    fn zero_prevalence_has_no_cases() {
        let c = GenConfig {
            case_prevalence: 0.0,
            ..small(500)
        };
        let g = generate(&c).unwrap();
        assert!(g.truth.iter().all(|t| t.intended_label != Status::Case));
        assert!(g.truth.iter().all(|t| t.exclusion_reason != Some(ExclusionReason::EarlyEvent)));
    }

    #[test]
    fn infeasible_vocab_is_rejected() {
        let c = GenConfig {
            n_diagnosis_codes: 3,
            ..small(10)
        };
        let err = generate(&c).unwrap_err();
        assert!(err.to_string().contains("n_diagnosis_codes"));
        let c = GenConfig {
            pattern_first_code: "D0001".into(),
            ..small(10)
        };
        assert!(generate(&c).is_err());
        let c = GenConfig {
            case_prevalence: 1.5,
            ..small(10)
        };
        assert!(c.violations().iter().any(|v| v.contains("case_prevalence")));
    }

    #[test]
    fn case_fraction_within_three_standard_errors() {
        let g = generate(&small(5000)).unwrap();
        let cases = g.truth.iter().filter(|t| t.intended_label == Status::Case).count();
        let controls = g.truth.iter().filter(|t| t.intended_label == Status::Control).count();
        let n = (cases + controls) as f64;
        let p = 0.21;
        let se = (p * (1.0 - p) / n).sqrt();
        let observed = cases as f64 / n;
        assert!((observed - p).abs() <= 3.0 * se, "observed {observed}, se {se}");
    }

    #[test]
    fn calibrated_to_visit_and_code_means() {
        let g = generate(&small(2000)).unwrap();
        let stats = summarize(&g.streams);
        let v = stats.visits_per_subject.mean;
        let c = stats.codes_per_visit.mean;
        assert!((v - 58.3).abs() / 58.3 < 0.10, "visits/subject {v}");
        assert!((c - 2.7).abs() / 2.7 < 0.10, "codes/visit {c}");
        assert!((2.0..=3.5).contains(&c));
        assert!(stats.visits_per_subject.max <= MAX_VISITS + 8);
        assert!(stats.visits_per_subject.min >= 1);
    }

    #[test]
    fn manifest_round_trip_and_flags() {
        let c = GenConfig::default();
        let m = describe(&c);
        let text = serde_json::to_string_pretty(&m).unwrap();
        assert!(text.contains(&c.index_drug_code));
        for code in &c.tf_marker_codes {
            assert!(text.contains(code.as_str()));
        }
        assert_eq!(GenManifest::parse(&text).unwrap().config, c);
        assert!(m.flags.is_empty());
        let flat = describe(&GenConfig {
            order_signal_strength: 0.0,
            ..c
        });
        assert!(flat.flags.iter().any(|f| f == FLAG_PREDICTION_AT_CHANCE));
    }

    #[test]
    fn pattern_codes_precede_index() {
        let c = small(300);
        let g = generate(&c).unwrap();
        for (s, t) in g.streams.iter().zip(&g.truth) {
            let Some(index) = t.index_date else { continue };
            let pattern: Vec<_> = s
                .events
                .iter()
                .filter(|e| e.code == c.pattern_first_code || e.code == c.pattern_second_code)
                .collect();
            assert_eq!(pattern.len(), 2, "{}", s.patient_id);
            assert!(pattern.iter().all(|e| e.date < index));
        }
    }
}
