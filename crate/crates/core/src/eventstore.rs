//! Coded clinical events and their on-disk forms.
//!
//! An [`EventRecord`] is one dated diagnosis, procedure or prescription code
//! for one patient. Events are grouped per patient into [`PatientStream`]s,
//! sorted by date with same-day events kept in file order.
//!
//! Two interchange formats are supported, both UTF-8:
//!
//! * JSONL, one object per line with the keys `patient_id`, `date`, `domain`,
//!   `system`, `code`, `emergency_admission`, `source_tag` in that order.
//! * CSV with the header
//!   `patient_id,date,domain,system,code,emergency_admission,source_tag`.
//!
//! Dates are `YYYY-MM-DD` on disk and whole day numbers (days since
//! 1970-01-01) in memory.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result, RowError};

const CSV_HEADER: [&str; 7] = [
    "patient_id",
    "date",
    "domain",
    "system",
    "code",
    "emergency_admission",
    "source_tag",
];

/// A calendar day, stored as days since 1970-01-01.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Day(pub i32);

impl Day {
    fn epoch() -> NaiveDate {
        NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid epoch")
    }

    pub fn from_ymd(year: i32, month: u32, day: u32) -> Option<Day> {
        NaiveDate::from_ymd_opt(year, month, day).map(Day::from_naive)
    }

    fn from_naive(date: NaiveDate) -> Day {
        Day((date - Day::epoch()).num_days() as i32)
    }

    pub fn to_naive(self) -> NaiveDate {
        Day::epoch() + chrono::Duration::days(self.0 as i64)
    }

    pub fn offset(self, days: i32) -> Day {
        Day(self.0 + days)
    }

    /// Signed number of days from `earlier` to `self`.
    pub fn days_since(self, earlier: Day) -> i32 {
        self.0 - earlier.0
    }
}

impl fmt::Display for Day {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.to_naive();
        write!(f, "{:04}-{:02}-{:02}", d.year(), d.month(), d.day())
    }
}

impl FromStr for Day {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = s.as_bytes();
        let shape_ok = bytes.len() == 10
            && bytes[4] == b'-'
            && bytes[7] == b'-'
            && bytes
                .iter()
                .enumerate()
                .all(|(i, b)| i == 4 || i == 7 || b.is_ascii_digit());
        if !shape_ok {
            return Err(format!("bad date {s:?}, expected YYYY-MM-DD"));
        }
        NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .map(Day::from_naive)
            .map_err(|_| format!("bad date {s:?}, not a calendar date"))
    }
}

impl Serialize for Day {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Day {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Kind of clinical record. Also used as the unit of modality selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Diagnosis,
    Procedure,
    Prescription,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Diagnosis, Domain::Procedure, Domain::Prescription];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Diagnosis => "diagnosis",
            Domain::Procedure => "procedure",
            Domain::Prescription => "prescription",
        }
    }

    /// Whether `system` is a legal coding system for this domain.
    pub fn admits(self, system: CodeSystem) -> bool {
        use CodeSystem::*;
        matches!(
            (self, system),
            (Domain::Diagnosis, ICD9 | ICD10)
                | (Domain::Procedure, OPCS3 | OPCS4)
                | (Domain::Prescription, READ | BNF)
        )
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "diagnosis" => Ok(Domain::Diagnosis),
            "procedure" => Ok(Domain::Procedure),
            "prescription" => Ok(Domain::Prescription),
            other => Err(format!("unknown domain {other:?}")),
        }
    }
}

#[allow(clippy::upper_case_acronyms)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CodeSystem {
    ICD9,
    ICD10,
    OPCS3,
    OPCS4,
    READ,
    BNF,
}

impl CodeSystem {
    pub fn as_str(self) -> &'static str {
        match self {
            CodeSystem::ICD9 => "ICD9",
            CodeSystem::ICD10 => "ICD10",
            CodeSystem::OPCS3 => "OPCS3",
            CodeSystem::OPCS4 => "OPCS4",
            CodeSystem::READ => "READ",
            CodeSystem::BNF => "BNF",
        }
    }
}

impl fmt::Display for CodeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CodeSystem {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ICD9" => Ok(CodeSystem::ICD9),
            "ICD10" => Ok(CodeSystem::ICD10),
            "OPCS3" => Ok(CodeSystem::OPCS3),
            "OPCS4" => Ok(CodeSystem::OPCS4),
            "READ" => Ok(CodeSystem::READ),
            "BNF" => Ok(CodeSystem::BNF),
            other => Err(format!("unknown code system {other:?}")),
        }
    }
}

/// One timestamped coded clinical event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub patient_id: String,
    pub date: Day,
    pub domain: Domain,
    pub system: CodeSystem,
    pub code: String,
    /// Only meaningful for diagnosis events.
    pub emergency_admission: bool,
    pub source_tag: String,
}

impl EventRecord {
    /// Checks the record-level invariants, returning the first violation.
    pub fn check(&self) -> std::result::Result<(), String> {
        if self.patient_id.is_empty() {
            return Err("empty patient_id".into());
        }
        if self.code.is_empty() {
            return Err("empty code".into());
        }
        if self.code.chars().any(|c| c.is_whitespace() || c == ',') {
            return Err(format!("code {:?} contains whitespace or a comma", self.code));
        }
        if !self.domain.admits(self.system) {
            return Err(format!(
                "domain/system rule: domain {} cannot be coded in {} \
                 (diagnosis=ICD9|ICD10, procedure=OPCS3|OPCS4, prescription=READ|BNF)",
                self.domain, self.system
            ));
        }
        Ok(())
    }
}

/// All events of one patient, ascending by date; same-day events keep
/// their ingestion order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientStream {
    pub patient_id: String,
    pub events: Vec<EventRecord>,
}

impl PatientStream {
    /// Builds a stream, stably sorting `events` by date.
    pub fn new(patient_id: impl Into<String>, mut events: Vec<EventRecord>) -> Self {
        events.sort_by_key(|e| e.date);
        PatientStream {
            patient_id: patient_id.into(),
            events,
        }
    }

    pub fn is_sorted(&self) -> bool {
        self.events.windows(2).all(|w| w[0].date <= w[1].date)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    /// Guesses the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Format::Csv,
            _ => Format::Jsonl,
        }
    }
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(Format::Jsonl),
            "csv" => Ok(Format::Csv),
            other => Err(format!("unknown format {other:?}")),
        }
    }
}

/// Result of reading an event file: valid streams plus rejected rows.
#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub streams: Vec<PatientStream>,
    pub rejected: Vec<RowError>,
    /// Data rows seen (header excluded, blank lines excluded).
    pub rows_read: usize,
}

impl Ingested {
    pub fn event_count(&self) -> usize {
        self.streams.iter().map(PatientStream::len).sum()
    }

    /// Turns any rejected row into an error.
    pub fn into_strict(self) -> Result<Vec<PatientStream>> {
        match self.rejected.first() {
            None => Ok(self.streams),
            Some(first) => Err(Error::Rows {
                count: self.rejected.len(),
                first: first.clone(),
            }),
        }
    }
}

#[derive(Deserialize)]
struct RawJsonEvent {
    patient_id: Option<String>,
    date: Option<String>,
    domain: Option<String>,
    system: Option<String>,
    code: Option<String>,
    emergency_admission: Option<bool>,
    source_tag: Option<String>,
}

fn require<T>(value: Option<T>, field: &str) -> std::result::Result<T, String> {
    value.ok_or_else(|| format!("missing field {field:?}"))
}

fn build_record(
    patient_id: String,
    date: &str,
    domain: &str,
    system: &str,
    code: String,
    emergency_admission: bool,
    source_tag: String,
) -> std::result::Result<EventRecord, String> {
    let record = EventRecord {
        patient_id,
        date: date.parse()?,
        domain: domain.parse()?,
        system: system.parse()?,
        code,
        emergency_admission,
        source_tag,
    };
    record.check()?;
    Ok(record)
}

fn parse_json_line(line: &str) -> std::result::Result<EventRecord, String> {
    let raw: RawJsonEvent = serde_json::from_str(line).map_err(|e| e.to_string())?;
    build_record(
        require(raw.patient_id, "patient_id")?,
        &require(raw.date, "date")?,
        &require(raw.domain, "domain")?,
        &require(raw.system, "system")?,
        require(raw.code, "code")?,
        require(raw.emergency_admission, "emergency_admission")?,
        require(raw.source_tag, "source_tag")?,
    )
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("bad emergency_admission {other:?}, expected true|false")),
    }
}

fn group_rows(rows: Vec<(usize, std::result::Result<EventRecord, String>)>) -> Ingested {
    let mut out = Ingested {
        rows_read: rows.len(),
        ..Ingested::default()
    };
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut buckets: Vec<(String, Vec<EventRecord>)> = Vec::new();
    for (line, row) in rows {
        match row {
            Ok(event) => {
                let slot = *index.entry(event.patient_id.clone()).or_insert_with(|| {
                    buckets.push((event.patient_id.clone(), Vec::new()));
                    buckets.len() - 1
                });
                buckets[slot].1.push(event);
            }
            Err(message) => out.rejected.push(RowError { line, message }),
        }
    }
    out.streams = buckets
        .into_iter()
        .map(|(id, events)| PatientStream::new(id, events))
        .collect();
    out
}

fn ingest_jsonl(path: &Path) -> Result<Ingested> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            lines.push((i + 1, line));
        }
    }
    let rows = lines
        .par_iter()
        .map(|(n, line)| (*n, parse_json_line(line)))
        .collect();
    Ok(group_rows(rows))
}

fn ingest_csv(path: &Path) -> Result<Ingested> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(BufReader::new(file));
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(Error::Schema(format!("{}: {e}", path.display()))),
    };
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Ok(Ingested::default());
    }
    let columns: Vec<&str> = headers.iter().collect();
    if columns != CSV_HEADER {
        let missing: Vec<&str> = CSV_HEADER
            .iter()
            .copied()
            .filter(|c| !columns.contains(c))
            .collect();
        return Err(Error::Schema(format!(
            "{}: header must be {:?} (missing: {:?})",
            path.display(),
            CSV_HEADER.join(","),
            missing
        )));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        match record {
            Ok(r) => {
                let line = r.position().map(|p| p.line() as usize).unwrap_or(0);
                let parsed = if r.len() != CSV_HEADER.len() {
                    Err(format!("expected {} columns, found {}", CSV_HEADER.len(), r.len()))
                } else {
                    parse_bool(&r[5]).and_then(|emergency| {
                        build_record(
                            r[0].to_string(),
                            &r[1],
                            &r[2],
                            &r[3],
                            r[4].to_string(),
                            emergency,
                            r[6].to_string(),
                        )
                    })
                };
                rows.push((line, parsed));
            }
            Err(e) => {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                rows.push((line, Err(e.to_string())));
            }
        }
    }
    Ok(group_rows(rows))
}

/// Reads an event file. Malformed rows are collected in
/// [`Ingested::rejected`] rather than failing the whole read.
pub fn ingest(path: &Path, format: Format) -> Result<Ingested> {
    match format {
        Format::Jsonl => ingest_jsonl(path),
        Format::Csv => ingest_csv(path),
    }
}

/// Writes streams in their given order, events in stream order.
pub fn emit(streams: &[PatientStream], path: &Path, format: Format) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    match format {
        Format::Jsonl => {
            for event in streams.iter().flat_map(|s| &s.events) {
                serde_json::to_writer(&mut out, event)?;
                out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
        }
        Format::Csv => {
            let mut writer = csv::Writer::from_writer(&mut out);
            let csv_err = |e: csv::Error| Error::Schema(format!("{}: {e}", path.display()));
            writer.write_record(CSV_HEADER).map_err(csv_err)?;
            for e in streams.iter().flat_map(|s| &s.events) {
                let date = e.date.to_string();
                let emergency = if e.emergency_admission { "true" } else { "false" };
                writer
                    .write_record([
                        e.patient_id.as_str(),
                        date.as_str(),
                        e.domain.as_str(),
                        e.system.as_str(),
                        e.code.as_str(),
                        emergency,
                        e.source_tag.as_str(),
                    ])
                    .map_err(csv_err)?;
            }
            writer.flush().map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Max/median/mean/min of a count distribution.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CountSummary {
    pub mean: f64,
    pub max: usize,
    pub median: f64,
    pub min: usize,
}

impl CountSummary {
    fn of(mut values: Vec<usize>) -> CountSummary {
        if values.is_empty() {
            return CountSummary::default();
        }
        values.sort_unstable();
        let n = values.len();
        let total: u64 = values.iter().map(|&v| v as u64).sum();
        let median = if n % 2 == 1 {
            values[n / 2] as f64
        } else {
            (values[n / 2 - 1] + values[n / 2]) as f64 / 2.0
        };
        CountSummary {
            mean: total as f64 / n as f64,
            max: values[n - 1],
            median,
            min: values[0],
        }
    }
}

/// Corpus statistics in the shape of a cohort description table.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StreamStats {
    pub subjects: usize,
    pub subjects_with_visits: usize,
    pub visits: usize,
    pub unique_codes: usize,
    pub visits_per_subject: CountSummary,
    pub codes_per_visit: CountSummary,
    /// Set when there are no visits, so the means above are placeholders.
    pub undefined_means: bool,
}

/// Visits are distinct (patient, date) pairs.
pub fn summarize(streams: &[PatientStream]) -> StreamStats {
    let mut codes = BTreeSet::new();
    let mut visits_per_subject = Vec::new();
    let mut codes_per_visit = Vec::new();
    for stream in streams {
        let mut visits = 0;
        let mut i = 0;
        while i < stream.events.len() {
            let date = stream.events[i].date;
            let start = i;
            while i < stream.events.len() && stream.events[i].date == date {
                codes.insert(stream.events[i].code.as_str());
                i += 1;
            }
            codes_per_visit.push(i - start);
            visits += 1;
        }
        if visits > 0 {
            visits_per_subject.push(visits);
        }
    }
    StreamStats {
        subjects: streams.len(),
        subjects_with_visits: visits_per_subject.len(),
        visits: codes_per_visit.len(),
        unique_codes: codes.len(),
        undefined_means: codes_per_visit.is_empty(),
        visits_per_subject: CountSummary::of(visits_per_subject),
        codes_per_visit: CountSummary::of(codes_per_visit),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn event(pid: &str, date: Day, domain: Domain, code: &str) -> EventRecord {
        let system = match domain {
            Domain::Diagnosis => CodeSystem::ICD10,
            Domain::Procedure => CodeSystem::OPCS4,
            Domain::Prescription => CodeSystem::BNF,
        };
        EventRecord {
            patient_id: pid.into(),
            date,
            domain,
            system,
            code: code.into(),
            emergency_admission: false,
            source_tag: "test".into(),
        }
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn day_round_trips_iso() {
        let d: Day = "2001-01-02".parse().unwrap();
        assert_eq!(d.to_string(), "2001-01-02");
        assert_eq!(Day::from_ymd(1970, 1, 1), Some(Day(0)));
        assert!("2001-02-30".parse::<Day>().is_err());
        assert!("2001-1-02".parse::<Day>().is_err());
    }

    #[test]
    fn csv_rows_are_sorted_by_date() {
        let dir = tempfile::tempdir().unwrap();
        let body = "patient_id,date,domain,system,code,emergency_admission,source_tag\n\
                    p1,2001-01-02,diagnosis,ICD10,I21,false,hes\n\
                    p1,2001-01-01,procedure,OPCS4,K75,false,hes\n\
                    p1,2001-01-03,prescription,BNF,0209,false,gp\n";
        let got = ingest(&write(&dir, "e.csv", body), Format::Csv).unwrap();
        assert_eq!(got.streams.len(), 1);
        let days: Vec<String> = got.streams[0].events.iter().map(|e| e.date.to_string()).collect();
        assert_eq!(days, ["2001-01-01", "2001-01-02", "2001-01-03"]);
    }

    #[test]
    fn inconsistent_domain_system_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let body = r#"{"patient_id":"p1","date":"2001-01-01","domain":"diagnosis","system":"BNF","code":"X1","emergency_admission":false,"source_tag":""}
{"patient_id":"p1","date":"2001-01-01","domain":"diagnosis","system":"ICD10","code":"X2","emergency_admission":false,"source_tag":""}
"#;
        let got = ingest(&write(&dir, "e.jsonl", body), Format::Jsonl).unwrap();
        assert_eq!(got.rejected.len(), 1);
        assert_eq!(got.rejected[0].line, 1);
        assert!(got.rejected[0].message.contains("domain/system rule"));
        assert_eq!(got.event_count(), 1);
        assert!(got.into_strict().is_err());
    }

    #[test]
    fn missing_column_and_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let body = "patient_id,date,domain,system,code,source_tag\n";
        assert!(matches!(
            ingest(&write(&dir, "a.csv", body), Format::Csv),
            Err(Error::Schema(_))
        ));
        let body = "patient_id,date,domain,system,code,emergency_admission,source_tag\n\
                    p1,2001-13-01,diagnosis,ICD10,I21,false,x\n\
                    p1,2001-01-01,diagnosis,ICD10,I21,maybe,x\n\
                    p1,2001-01-01,diagnosis,ICD10\n";
        let got = ingest(&write(&dir, "b.csv", body), Format::Csv).unwrap();
        assert_eq!(got.rows_read, 3);
        let lines: Vec<usize> = got.rejected.iter().map(|r| r.line).collect();
        assert_eq!(lines, [2, 3, 4]);
        let body = r#"{"patient_id":"p1","date":"2001-01-01","domain":"diagnosis","system":"ICD10","emergency_admission":false,"source_tag":""}"#;
        let got = ingest(&write(&dir, "c.jsonl", body), Format::Jsonl).unwrap();
        assert!(got.rejected[0].message.contains("\"code\""));
    }

    #[test]
    fn empty_files_are_empty_collections() {
        let dir = tempfile::tempdir().unwrap();
        for (name, fmt) in [("e.jsonl", Format::Jsonl), ("e.csv", Format::Csv)] {
            let got = ingest(&write(&dir, name, ""), fmt).unwrap();
            assert!(got.streams.is_empty() && got.rejected.is_empty());
        }
        assert!(matches!(
            ingest(&dir.path().join("absent.jsonl"), Format::Jsonl),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn thousand_rows_ten_patients() {
        let dir = tempfile::tempdir().unwrap();
        let mut streams = Vec::new();
        for p in 0..10 {
            let pid = format!("p{p}");
            let events = (0..100)
                .map(|i| event(&pid, Day(10_000 + (i * 7) % 13), Domain::Diagnosis, &format!("C{i}")))
                .collect();
            streams.push(PatientStream::new(pid, events));
        }
        let path = dir.path().join("x.jsonl");
        emit(&streams, &path, Format::Jsonl).unwrap();
        let got = ingest(&path, Format::Jsonl).unwrap();
        assert_eq!(got.streams.len(), 10);
        assert_eq!(got.event_count(), 1000);
        assert_eq!(got.streams, ingest(&path, Format::Jsonl).unwrap().streams);
    }

    #[test]
    fn emit_empty_and_single() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("e.csv");
        emit(&[], &csv_path, Format::Csv).unwrap();
        assert_eq!(std::fs::read_to_string(&csv_path).unwrap(), format!("{}\n", CSV_HEADER.join(",")));
        let jsonl_path = dir.path().join("e.jsonl");
        emit(&[], &jsonl_path, Format::Jsonl).unwrap();
        assert_eq!(std::fs::read_to_string(&jsonl_path).unwrap(), "");

        let mut e = event("p1", Day(11_000), Domain::Diagnosis, "I21");
        e.emergency_admission = true;
        let single = vec![PatientStream::new("p1", vec![e])];
        for (path, fmt) in [(&csv_path, Format::Csv), (&jsonl_path, Format::Jsonl)] {
            emit(&single, path, fmt).unwrap();
            let first = std::fs::read(path).unwrap();
            let back = ingest(path, fmt).unwrap().into_strict().unwrap();
            assert_eq!(back, single);
            emit(&back, path, fmt).unwrap();
            assert_eq!(std::fs::read(path).unwrap(), first);
        }
        let line = std::fs::read_to_string(&jsonl_path).unwrap();
        assert_eq!(
            line,
            "{\"patient_id\":\"p1\",\"date\":\"2000-02-13\",\"domain\":\"diagnosis\",\"system\":\"ICD10\",\
             \"code\":\"I21\",\"emergency_admission\":true,\"source_tag\":\"test\"}\n"
        );
    }

    #[test]
    fn summarize_same_day_is_one_visit() {
        let s = PatientStream::new(
            "p",
            vec![
                event("p", Day(5), Domain::Diagnosis, "a"),
                event("p", Day(5), Domain::Procedure, "b"),
            ],
        );
        let stats = summarize(&[s]);
        assert_eq!(stats.visits, 1);
        assert_eq!(stats.codes_per_visit.mean, 2.0);

        let empty = summarize(&[]);
        assert_eq!(empty.subjects, 0);
        assert_eq!(empty.visits_per_subject.mean, 0.0);
        assert!(empty.undefined_means);
    }

    #[test]
    fn summarize_hand_counted_fixture() {
        let d = Domain::Diagnosis;
        let streams = vec![
            PatientStream::new("a", vec![event("a", Day(1), d, "x"), event("a", Day(1), d, "y"), event("a", Day(2), d, "x")]),
            PatientStream::new("b", vec![event("b", Day(3), d, "z")]),
            PatientStream::new("c", vec![]),
            PatientStream::new(
                "d",
                vec![
                    event("d", Day(1), d, "x"),
                    event("d", Day(2), d, "w"),
                    event("d", Day(4), d, "w"),
                    event("d", Day(4), d, "w"),
                    event("d", Day(4), d, "v"),
                ],
            ),
            PatientStream::new("e", vec![event("e", Day(9), d, "y"), event("e", Day(10), d, "y")]),
        ];
        let s = summarize(&streams);
        assert_eq!(s.subjects, 5);
        assert_eq!(s.subjects_with_visits, 4);
        // a:2 b:1 d:3 e:2
        assert_eq!(s.visits, 8);
        assert_eq!(s.unique_codes, 5);
        assert_eq!(s.visits_per_subject, CountSummary { mean: 2.0, max: 3, median: 2.0, min: 1 });
        // sizes: 2,1,1,1,1,3,1,1
        assert_eq!(s.codes_per_visit, CountSummary { mean: 11.0 / 8.0, max: 3, median: 1.0, min: 1 });
        assert!(!s.undefined_means);
    }
}
