//! Treatment-failure labeling.
//!
//! A patient enters the cohort on the date of their first index-drug
//! prescription. Candidate outcome events are events whose code is a
//! treatment-failure code and (by default) whose `emergency_admission` flag
//! is set. With `b` the blanking window and `o` the outcome window:
//!
//! | earliest candidate on or after index | status |
//! |---|---|
//! | in `[index, index + b]` | excluded (`early_event`) |
//! | in `(index + b, index + o]` | case |
//! | none in `[index, index + o]` | control |
//!
//! The blanking check runs first, so one early event excludes the patient
//! even when later events exist. A patient whose records use an index-drug
//! code outside the prescription domain, or a treatment-failure code in the
//! prescription domain, is excluded as `data_inconsistent`.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eventstore::{Day, Domain, PatientStream};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortRules {
    pub index_drug_codes: BTreeSet<String>,
    pub tf_event_codes: BTreeSet<String>,
    #[serde(default = "default_outcome_window")]
    pub outcome_window_days: i32,
    #[serde(default = "default_blanking_window")]
    pub blanking_window_days: i32,
    #[serde(default = "default_true")]
    pub require_emergency: bool,
}

fn default_outcome_window() -> i32 {
    365
}

fn default_blanking_window() -> i32 {
    7
}

fn default_true() -> bool {
    true
}

impl Default for CohortRules {
    fn default() -> Self {
        CohortRules {
            index_drug_codes: BTreeSet::new(),
            tf_event_codes: BTreeSet::new(),
            outcome_window_days: 365,
            blanking_window_days: 7,
            require_emergency: true,
        }
    }
}

impl CohortRules {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.index_drug_codes.is_empty() {
            v.push("rules.index_drug_codes must not be empty".into());
        }
        if self.tf_event_codes.is_empty() {
            v.push("rules.tf_event_codes must not be empty".into());
        }
        let shared: Vec<&String> = self.index_drug_codes.intersection(&self.tf_event_codes).collect();
        if !shared.is_empty() {
            v.push(format!("rules: code sets must be disjoint, both contain {shared:?}"));
        }
        if self.blanking_window_days < 0 {
            v.push("rules.blanking_window_days must be non-negative".into());
        }
        if self.blanking_window_days >= self.outcome_window_days {
            v.push(format!(
                "rules.blanking_window_days ({}) must be smaller than rules.outcome_window_days ({})",
                self.blanking_window_days, self.outcome_window_days
            ));
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

    pub fn load(path: &Path) -> Result<CohortRules> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let rules: CohortRules = serde_json::from_reader(BufReader::new(file))?;
        rules.validate()?;
        Ok(rules)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Case,
    Control,
    Excluded,
    NotInCohort,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Case => "case",
            Status::Control => "control",
            Status::Excluded => "excluded",
            Status::NotInCohort => "not_in_cohort",
        }
    }

    pub fn is_labeled(self) -> bool {
        matches!(self, Status::Case | Status::Control)
    }
}

impl FromStr for Status {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "case" => Ok(Status::Case),
            "control" => Ok(Status::Control),
            "excluded" => Ok(Status::Excluded),
            "not_in_cohort" => Ok(Status::NotInCohort),
            other => Err(format!("unknown status {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    EarlyEvent,
    NonEmergencyEventOnly,
    DataInconsistent,
}

impl ExclusionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExclusionReason::EarlyEvent => "early_event",
            ExclusionReason::NonEmergencyEventOnly => "non_emergency_event_only",
            ExclusionReason::DataInconsistent => "data_inconsistent",
        }
    }
}

impl FromStr for ExclusionReason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "early_event" => Ok(ExclusionReason::EarlyEvent),
            "non_emergency_event_only" => Ok(ExclusionReason::NonEmergencyEventOnly),
            "data_inconsistent" => Ok(ExclusionReason::DataInconsistent),
            other => Err(format!("unknown exclusion reason {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortLabel {
    pub patient_id: String,
    pub status: Status,
    pub index_date: Option<Day>,
    pub first_event_date: Option<Day>,
    pub exclusion_reason: Option<ExclusionReason>,
    /// Informational only; never changes `status`. Set to
    /// `NonEmergencyEventOnly` for controls whose only in-window
    /// treatment-failure records lacked the emergency flag.
    pub diagnostic: Option<ExclusionReason>,
}

impl CohortLabel {
    fn new(patient_id: &str, status: Status) -> Self {
        CohortLabel {
            patient_id: patient_id.to_string(),
            status,
            index_date: None,
            first_event_date: None,
            exclusion_reason: None,
            diagnostic: None,
        }
    }
}

/// Labels one patient.
pub fn annotate(stream: &PatientStream, rules: &CohortRules) -> Result<CohortLabel> {
    if !stream.is_sorted() {
        return Err(Error::Data(format!("stream for {} is not sorted by date", stream.patient_id)));
    }
    let Some(index) = stream
        .events
        .iter()
        .find(|e| e.domain == Domain::Prescription && rules.index_drug_codes.contains(&e.code))
        .map(|e| e.date)
    else {
        return Ok(CohortLabel::new(&stream.patient_id, Status::NotInCohort));
    };

    let mut label = CohortLabel::new(&stream.patient_id, Status::Control);
    label.index_date = Some(index);

    let inconsistent = stream.events.iter().any(|e| {
        (e.domain != Domain::Prescription && rules.index_drug_codes.contains(&e.code))
            || (e.domain == Domain::Prescription && rules.tf_event_codes.contains(&e.code))
    });
    if inconsistent {
        label.status = Status::Excluded;
        label.exclusion_reason = Some(ExclusionReason::DataInconsistent);
        return Ok(label);
    }

    let blanking_end = index.offset(rules.blanking_window_days);
    let outcome_end = index.offset(rules.outcome_window_days);
    let mut non_emergency_in_window = false;
    // Events are sorted, so the first qualifying candidate is the earliest.
    for event in stream.events.iter().filter(|e| e.date >= index && e.date <= outcome_end) {
        if !rules.tf_event_codes.contains(&event.code) {
            continue;
        }
        if rules.require_emergency && !event.emergency_admission {
            non_emergency_in_window = true;
            continue;
        }
        label.first_event_date = Some(event.date);
        if event.date <= blanking_end {
            label.status = Status::Excluded;
            label.exclusion_reason = Some(ExclusionReason::EarlyEvent);
        } else {
            label.status = Status::Case;
        }
        return Ok(label);
    }
    if non_emergency_in_window {
        label.diagnostic = Some(ExclusionReason::NonEmergencyEventOnly);
    }
    Ok(label)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub case: usize,
    pub control: usize,
    pub excluded: usize,
    pub not_in_cohort: usize,
    pub excluded_early_event: usize,
    pub excluded_data_inconsistent: usize,
    pub non_emergency_event_only: usize,
}

impl CohortSummary {
    pub fn total(&self) -> usize {
        self.case + self.control + self.excluded + self.not_in_cohort
    }

    pub fn with_index_prescription(&self) -> usize {
        self.case + self.control + self.excluded
    }

    fn add(&mut self, label: &CohortLabel) {
        match label.status {
            Status::Case => self.case += 1,
            Status::Control => self.control += 1,
            Status::Excluded => self.excluded += 1,
            Status::NotInCohort => self.not_in_cohort += 1,
        }
        match label.exclusion_reason {
            Some(ExclusionReason::EarlyEvent) => self.excluded_early_event += 1,
            Some(ExclusionReason::DataInconsistent) => self.excluded_data_inconsistent += 1,
            _ => {}
        }
        if label.diagnostic == Some(ExclusionReason::NonEmergencyEventOnly) {
            self.non_emergency_event_only += 1;
        }
    }
}

/// Labels every patient; output is sorted by patient id.
pub fn annotate_all(streams: &[PatientStream], rules: &CohortRules) -> Result<(Vec<CohortLabel>, CohortSummary)> {
    let mut labels = streams
        .par_iter()
        .map(|s| annotate(s, rules))
        .collect::<Result<Vec<_>>>()?;
    labels.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    let mut summary = CohortSummary::default();
    for label in &labels {
        summary.add(label);
    }
    Ok((labels, summary))
}

const LABEL_HEADER: [&str; 5] = ["patient_id", "status", "index_date", "first_event_date", "exclusion_reason"];

/// Writes labels as CSV; absent values are empty cells.
pub fn write_labels(labels: &[CohortLabel], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{}", LABEL_HEADER.join(",")).map_err(|e| Error::io(path, e))?;
    for l in labels {
        let day = |d: Option<Day>| d.map(|d| d.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{}",
            l.patient_id,
            l.status.as_str(),
            day(l.index_date),
            day(l.first_event_date),
            l.exclusion_reason.map(|r| r.as_str()).unwrap_or("")
        )
        .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<CohortLabel>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != LABEL_HEADER {
        return Err(Error::Schema(format!("{}: header must be {}", path.display(), LABEL_HEADER.join(","))));
    }
    let mut labels = Vec::new();
    for record in reader.records() {
        let r = record.map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        let bad = |m: String| Error::Schema(format!("{}: {m}", path.display()));
        let day = |s: &str| -> Result<Option<Day>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(bad)
            }
        };
        labels.push(CohortLabel {
            patient_id: r[0].to_string(),
            status: r[1].parse().map_err(bad)?,
            index_date: day(&r[2])?,
            first_event_date: day(&r[3])?,
            exclusion_reason: if r[4].is_empty() { None } else { Some(r[4].parse().map_err(bad)?) },
            diagnostic: None,
        });
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventstore::{CodeSystem, EventRecord};

    fn rules() -> CohortRules {
        CohortRules {
            index_drug_codes: ["CLOP".to_string()].into_iter().collect(),
            tf_event_codes: ["MI".to_string(), "STENT".to_string()].into_iter().collect(),
            ..CohortRules::default()
        }
    }

    fn ev(day: i32, domain: Domain, code: &str, emergency: bool) -> EventRecord {
        EventRecord {
            patient_id: "p".into(),
            date: Day(1000 + day),
            domain,
            system: match domain {
                Domain::Diagnosis => CodeSystem::ICD10,
                Domain::Procedure => CodeSystem::OPCS4,
                Domain::Prescription => CodeSystem::BNF,
            },
            code: code.into(),
            emergency_admission: emergency,
            source_tag: String::new(),
        }
    }

    fn label(events: Vec<EventRecord>) -> CohortLabel {
        annotate(&PatientStream::new("p", events), &rules()).unwrap()
    }

    fn with_event_at(day: i32, emergency: bool) -> CohortLabel {
        label(vec![
            ev(-30, Domain::Diagnosis, "X", false),
            ev(0, Domain::Prescription, "CLOP", false),
            ev(day, Domain::Diagnosis, "MI", emergency),
        ])
    }

    #[test]
    fn case_at_day_100() {
        let l = with_event_at(100, true);
        assert_eq!(l.status, Status::Case);
        assert_eq!(l.first_event_date, Some(Day(1100)));
        assert_eq!(l.index_date, Some(Day(1000)));
    }

    #[test]
    fn early_event_at_day_3() {
        let l = with_event_at(3, true);
        assert_eq!(l.status, Status::Excluded);
        assert_eq!(l.exclusion_reason, Some(ExclusionReason::EarlyEvent));
    }

    #[test]
    fn non_emergency_is_ignored() {
        let l = with_event_at(100, false);
        assert_eq!(l.status, Status::Control);
        assert_eq!(l.exclusion_reason, None);
        assert_eq!(l.diagnostic, Some(ExclusionReason::NonEmergencyEventOnly));
        let relaxed = CohortRules {
            require_emergency: false,
            ..rules()
        };
        let s = PatientStream::new(
            "p",
            vec![ev(0, Domain::Prescription, "CLOP", false), ev(100, Domain::Diagnosis, "MI", false)],
        );
        assert_eq!(annotate(&s, &relaxed).unwrap().status, Status::Case);
    }

    #[test]
    fn early_event_governs_later_ones() {
        let l = label(vec![
            ev(0, Domain::Prescription, "CLOP", false),
            ev(3, Domain::Diagnosis, "MI", true),
            ev(200, Domain::Diagnosis, "MI", true),
        ]);
        assert_eq!(l.status, Status::Excluded);
        assert_eq!(l.first_event_date, Some(Day(1003)));
    }

    #[test]
    fn window_boundaries() {
        assert_eq!(with_event_at(0, true).status, Status::Excluded);
        assert_eq!(with_event_at(7, true).status, Status::Excluded);
        assert_eq!(with_event_at(8, true).status, Status::Case);
        assert_eq!(with_event_at(365, true).status, Status::Case);
        assert_eq!(with_event_at(366, true).status, Status::Control);
        assert_eq!(with_event_at(-1, true).status, Status::Control);
    }

    #[test]
    fn index_is_first_prescription_and_domain_matters() {
        let l = label(vec![
            ev(0, Domain::Prescription, "CLOP", false),
            ev(50, Domain::Prescription, "CLOP", false),
            ev(54, Domain::Diagnosis, "MI", true),
        ]);
        assert_eq!(l.status, Status::Case);
        assert_eq!(l.index_date, Some(Day(1000)));
        let none = label(vec![ev(0, Domain::Diagnosis, "MI", true)]);
        assert_eq!(none.status, Status::NotInCohort);
        assert_eq!(none.index_date, None);
        let bad = label(vec![
            ev(0, Domain::Prescription, "CLOP", false),
            ev(2, Domain::Diagnosis, "CLOP", false),
        ]);
        assert_eq!(bad.exclusion_reason, Some(ExclusionReason::DataInconsistent));
    }

    #[test]
    fn procedure_codes_count_too() {
        let l = label(vec![ev(0, Domain::Prescription, "CLOP", false), ev(30, Domain::Procedure, "STENT", true)]);
        assert_eq!(l.status, Status::Case);
    }

    #[test]
    fn unsorted_stream_is_an_error() {
        let s = PatientStream {
            patient_id: "p".into(),
            events: vec![ev(5, Domain::Diagnosis, "X", false), ev(0, Domain::Diagnosis, "X", false)],
        };
        assert!(annotate(&s, &rules()).is_err());
    }

    #[test]
    fn removing_tf_codes_from_a_case_gives_control() {
        let mut events = vec![
            ev(0, Domain::Prescription, "CLOP", false),
            ev(40, Domain::Diagnosis, "MI", true),
            ev(41, Domain::Procedure, "STENT", true),
        ];
        assert_eq!(label(events.clone()).status, Status::Case);
        events.retain(|e| !rules().tf_event_codes.contains(&e.code));
        assert_eq!(label(events).status, Status::Control);
    }

    #[test]
    fn rules_validation() {
        assert!(rules().violations().is_empty());
        let r = CohortRules {
            blanking_window_days: 365,
            ..rules()
        };
        assert!(r.violations().iter().any(|v| v.contains("blanking_window_days")));
        let r = CohortRules {
            tf_event_codes: ["CLOP".to_string()].into_iter().collect(),
            ..rules()
        };
        assert!(r.violations().iter().any(|v| v.contains("disjoint")));
    }

    #[test]
    fn empty_summary_and_label_csv() {
        let (labels, summary) = annotate_all(&[], &rules()).unwrap();
        assert!(labels.is_empty());
        assert_eq!(summary, CohortSummary::default());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        let labels = vec![with_event_at(100, true), with_event_at(3, true), label(vec![])];
        write_labels(&labels, &path).unwrap();
        let back = read_labels(&path).unwrap();
        let strip = |ls: &[CohortLabel]| {
            ls.iter()
                .map(|l| CohortLabel { diagnostic: None, ..l.clone() })
                .collect::<Vec<_>>()
        };
        assert_eq!(back, strip(&labels));
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("patient_id,status,index_date,first_event_date,exclusion_reason\n"));
        assert!(text.contains("p,excluded,1972-09-27,1972-09-30,early_event\n"));
    }
}
