//! Metadata record ingestion and seeded stratified sampling.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::scoped_rng;
use crate::taxonomy::{is_valid_code, Taxonomy};

/// Appended to descriptions cut by [`truncate_for_prompt`].
pub const ELLIPSIS: char = '…';

pub const DEFAULT_DESCRIPTION_BUDGET: usize = 4000;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordFormat {
    Jsonl,
    Csv,
}

impl std::str::FromStr for RecordFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(RecordFormat::Jsonl),
            "csv" => Ok(RecordFormat::Csv),
            other => Err(format!("unknown record format {other:?}")),
        }
    }
}

impl RecordFormat {
    /// Guesses the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => RecordFormat::Csv,
            _ => RecordFormat::Jsonl,
        }
    }
}

/// Strict parsing aborts on the first bad line; lenient parsing skips it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(rename = "subjects", default)]
    pub gold_codes: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extras: BTreeMap<String, String>,
}

impl MetadataRecord {
    pub fn new(
        id: impl Into<String>,
        title: impl Into<String>,
        description: impl Into<String>,
        gold_codes: Vec<String>,
    ) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            description: description.into(),
            gold_codes,
            extras: BTreeMap::new(),
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    #[serde(default)]
    title: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    subjects: Vec<String>,
    #[serde(default)]
    extras: BTreeMap<String, serde_json::Value>,
}

fn flatten_extras(extras: BTreeMap<String, serde_json::Value>) -> BTreeMap<String, String> {
    extras
        .into_iter()
        .map(|(k, v)| match v {
            serde_json::Value::String(s) => (k, s),
            other => (k, other.to_string()),
        })
        .collect()
}

#[derive(Debug, Default)]
pub struct ParsedRecords {
    pub records: Vec<MetadataRecord>,
    /// Lines skipped in lenient mode, with the reason.
    pub skipped: Vec<(usize, String)>,
}

fn validate(record: &MetadataRecord, seen: &HashSet<String>) -> Result<(), String> {
    if record.id.trim().is_empty() {
        return Err("empty id".into());
    }
    if seen.contains(&record.id) {
        return Err(format!("duplicate id {:?}", record.id));
    }
    if record.title.trim().is_empty() && record.description.trim().is_empty() {
        return Err(format!("record {:?} has neither title nor description", record.id));
    }
    if let Some(bad) = record.gold_codes.iter().find(|c| !is_valid_code(c)) {
        return Err(format!("malformed subject code {bad:?}"));
    }
    Ok(())
}

struct Collector {
    mode: ParseMode,
    out: ParsedRecords,
    seen: HashSet<String>,
}

impl Collector {
    fn push(&mut self, line: usize, parsed: Result<MetadataRecord, String>) -> Result<(), CorpusError> {
        let checked = parsed.and_then(|r| validate(&r, &self.seen).map(|()| r));
        match checked {
            Ok(record) => {
                self.seen.insert(record.id.clone());
                self.out.records.push(record);
                Ok(())
            }
            Err(reason) => match self.mode {
                ParseMode::Strict => Err(CorpusError::Malformed { line, reason }),
                ParseMode::Lenient => {
                    log::warn!("skipping line {line}: {reason}");
                    self.out.skipped.push((line, reason));
                    Ok(())
                }
            },
        }
    }
}

/// Reads records in input order. Gold codes are checked for shape only;
/// taxonomy membership is resolved later by [`stratum_of`].
pub fn parse_records<R: BufRead>(
    source: R,
    format: RecordFormat,
    mode: ParseMode,
) -> Result<ParsedRecords, CorpusError> {
    let mut collector = Collector {
        mode,
        out: ParsedRecords::default(),
        seen: HashSet::new(),
    };
    match format {
        RecordFormat::Jsonl => {
            for (idx, line) in source.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let parsed = serde_json::from_str::<RawRecord>(&line)
                    .map_err(|e| e.to_string())
                    .map(|raw| MetadataRecord {
                        id: raw.id,
                        title: raw.title,
                        description: raw.description,
                        gold_codes: raw.subjects,
                        extras: flatten_extras(raw.extras),
                    });
                collector.push(idx + 1, parsed)?;
            }
        }
        RecordFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(source);
            let headers = reader.headers().map_err(|e| CorpusError::Csv(e.to_string()))?.clone();
            let expected = ["id", "title", "description", "subjects", "extras_json"];
            if headers.iter().collect::<Vec<_>>() != expected {
                return Err(CorpusError::Malformed {
                    line: 1,
                    reason: format!("expected header {}", expected.join(",")),
                });
            }
            for (idx, row) in reader.records().enumerate() {
                // header is line 1
                let line = idx + 2;
                let parsed = row.map_err(|e| e.to_string()).and_then(|row| csv_row(&row));
                collector.push(line, parsed)?;
            }
        }
    }
    Ok(collector.out)
}

fn csv_row(row: &csv::StringRecord) -> Result<MetadataRecord, String> {
    let field = |i: usize| row.get(i).unwrap_or_default();
    let subjects = field(3);
    let gold_codes = if subjects.trim().is_empty() {
        Vec::new()
    } else {
        subjects.split('|').map(|s| s.trim().to_string()).collect()
    };
    let extras_json = field(4);
    let extras = if extras_json.trim().is_empty() {
        BTreeMap::new()
    } else {
        let raw: BTreeMap<String, serde_json::Value> =
            serde_json::from_str(extras_json).map_err(|e| format!("extras_json: {e}"))?;
        flatten_extras(raw)
    };
    Ok(MetadataRecord {
        id: field(0).to_string(),
        title: field(1).to_string(),
        description: field(2).to_string(),
        gold_codes,
        extras,
    })
}

pub fn write_records<W: Write>(
    records: &[MetadataRecord],
    format: RecordFormat,
    mut sink: W,
) -> Result<(), CorpusError> {
    match format {
        RecordFormat::Jsonl => {
            for record in records {
                let line = serde_json::to_string(record).expect("records serialize");
                writeln!(sink, "{line}")?;
            }
        }
        RecordFormat::Csv => {
            let mut writer = csv::Writer::from_writer(sink);
            let csv_err = |e: csv::Error| CorpusError::Csv(e.to_string());
            writer
                .write_record(["id", "title", "description", "subjects", "extras_json"])
                .map_err(csv_err)?;
            for r in records {
                let extras = if r.extras.is_empty() {
                    String::new()
                } else {
                    serde_json::to_string(&r.extras).expect("extras serialize")
                };
                writer
                    .write_record([
                        r.id.as_str(),
                        r.title.as_str(),
                        r.description.as_str(),
                        r.gold_codes.join("|").as_str(),
                        extras.as_str(),
                    ])
                    .map_err(csv_err)?;
            }
            writer.flush()?;
        }
    }
    Ok(())
}

/// Division of the first gold code that the taxonomy knows.
pub fn stratum_of<'t>(record: &MetadataRecord, taxonomy: &'t Taxonomy) -> Option<&'t str> {
    record
        .gold_codes
        .iter()
        .find_map(|code| taxonomy.division_of(code).ok())
}

/// Distinct divisions of a record's gold codes, in listed order.
pub fn gold_divisions<'t>(record: &MetadataRecord, taxonomy: &'t Taxonomy) -> Vec<&'t str> {
    let mut out: Vec<&str> = Vec::new();
    for code in &record.gold_codes {
        if let Ok(div) = taxonomy.division_of(code) {
            if !out.contains(&div) {
                out.push(div);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratifiedRecord {
    pub record: MetadataRecord,
    pub stratum: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratifiedSplit {
    pub demo_pool: Vec<StratifiedRecord>,
    pub test_set: Vec<StratifiedRecord>,
    pub seed: u64,
    pub cap_per_division: usize,
    pub test_per_division: usize,
}

/// Per-division tallies for a split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub code: String,
    pub label: String,
    pub available: usize,
    pub test: usize,
    pub demo: usize,
}

impl StratifiedSplit {
    pub fn demo_records(&self) -> Vec<MetadataRecord> {
        self.demo_pool.iter().map(|s| s.record.clone()).collect()
    }

    pub fn test_records(&self) -> Vec<MetadataRecord> {
        self.test_set.iter().map(|s| s.record.clone()).collect()
    }
}

/// Per division (in code order): shuffle that division's records with a
/// generator seeded from `(seed, code)`, take test records first, then up to
/// `cap` demonstration records from what remains.
///
/// Records whose gold codes name no known division are left out.
pub fn build_split(
    records: &[MetadataRecord],
    taxonomy: &Taxonomy,
    cap: usize,
    test_per_division: usize,
    seed: u64,
) -> StratifiedSplit {
    assert!(cap >= 1, "cap must be at least 1");
    assert!(test_per_division >= 1, "test_per_division must be at least 1");

    let mut by_division: BTreeMap<&str, Vec<&MetadataRecord>> = BTreeMap::new();
    for record in records {
        if let Some(stratum) = stratum_of(record, taxonomy) {
            by_division.entry(stratum).or_default().push(record);
        }
    }

    let mut demo_pool = Vec::new();
    let mut test_set = Vec::new();
    for (code, mut members) in by_division {
        let mut rng = scoped_rng(seed, code);
        members.shuffle(&mut rng);
        let n_test = test_per_division.min(members.len());
        let n_demo = cap.min(members.len() - n_test);
        let tag = |r: &&MetadataRecord| StratifiedRecord {
            record: (*r).clone(),
            stratum: code.to_string(),
        };
        test_set.extend(members[..n_test].iter().map(tag));
        demo_pool.extend(members[n_test..n_test + n_demo].iter().map(tag));
    }

    StratifiedSplit {
        demo_pool,
        test_set,
        seed,
        cap_per_division: cap,
        test_per_division,
    }
}

/// Availability and allocation per division, in taxonomy order.
pub fn split_counts(
    records: &[MetadataRecord],
    split: &StratifiedSplit,
    taxonomy: &Taxonomy,
) -> Vec<SplitCounts> {
    let mut available: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        if let Some(s) = stratum_of(r, taxonomy) {
            *available.entry(s).or_default() += 1;
        }
    }
    let count = |part: &[StratifiedRecord], code: &str| part.iter().filter(|s| s.stratum == code).count();
    taxonomy
        .divisions()
        .iter()
        .map(|d| SplitCounts {
            code: d.code.clone(),
            label: d.label.clone(),
            available: available.get(d.code.as_str()).copied().unwrap_or(0),
            test: count(&split.test_set, &d.code),
            demo: count(&split.demo_pool, &d.code),
        })
        .collect()
}

/// Cuts `text` to at most `max_chars` characters at a word boundary and
/// appends [`ELLIPSIS`]. Text without whitespace is cut hard.
pub fn truncate_for_prompt(text: &str, max_chars: usize) -> String {
    assert!(max_chars >= 1, "max_chars must be at least 1");
    let mut boundary = None;
    let mut cut = text.len();
    for (n, (byte, ch)) in text.char_indices().enumerate() {
        if n == max_chars {
            cut = byte;
            if ch.is_whitespace() {
                boundary = Some(byte);
            }
            break;
        }
        if ch.is_whitespace() {
            boundary = Some(byte);
        }
    }
    if cut == text.len() {
        return text.to_string();
    }
    let end = match boundary {
        Some(b) if !text[..b].trim_end().is_empty() => text[..b].trim_end().len(),
        _ => cut,
    };
    let mut out = String::with_capacity(end + ELLIPSIS.len_utf8());
    out.push_str(&text[..end]);
    out.push(ELLIPSIS);
    out
}
