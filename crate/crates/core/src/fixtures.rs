//! The shipped test bundle: taxonomy, synthetic corpus, prompt goldens,
//! published table data and offline backend fixtures. Everything is
//! compiled in, so tests and the CLI read the same bytes as the files under
//! `fixtures/`.

use std::collections::BTreeMap;
use std::io::BufReader;

use thiserror::Error;

use crate::corpus::{parse_records, stratum_of, MetadataRecord, ParseMode, RecordFormat};
use crate::gateway::{ReplayBackend, RuleMockBackend};
use crate::prompting::SelectionStrategy;
use crate::taxonomy::{load_taxonomy, Taxonomy};

pub const TAXONOMY: &str = include_str!("../fixtures/anzsrc_for_2008_divisions.tsv");
pub const SYNTHETIC_CORPUS: &str = include_str!("../fixtures/synthetic_corpus.jsonl");
pub const FIGURE2_RECORDS: &str = include_str!("../fixtures/figure2_records.jsonl");
pub const GOLDEN_PROMPT: &str = include_str!("../fixtures/golden_prompt_figure2.txt");
pub const TABLE2_COUNTS: &str = include_str!("../fixtures/table2_counts.tsv");
pub const TABLE3_VALUES: &str = include_str!("../fixtures/table3_values.tsv");
pub const MOCK_RULES: &str = include_str!("../fixtures/mock_rules.tsv");
pub const REPLAY_FIGURE2: &str = include_str!("../fixtures/replay/figure2.jsonl");

pub const FIXTURE_NAMES: [&str; 8] = [
    "taxonomy",
    "synthetic_corpus",
    "figure2_records",
    "golden_prompt",
    "table2_counts",
    "table3_values",
    "mock_rules",
    "replay_figure2",
];

pub const TABLE2_TOTAL: u64 = 1684;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FixtureError {
    #[error("no fixture named {0:?}")]
    Missing(String),
    #[error("fixture {name}: {reason}")]
    Invalid { name: String, reason: String },
}

fn invalid(name: &str, reason: impl Into<String>) -> FixtureError {
    FixtureError::Invalid {
        name: name.to_string(),
        reason: reason.into(),
    }
}

/// Published per-division precision for both selection strategies.
#[derive(Debug, Clone, PartialEq)]
pub struct Table3Values {
    pub random: BTreeMap<String, f64>,
    pub relevant: BTreeMap<String, f64>,
}

impl Table3Values {
    pub fn column(&self, strategy: SelectionStrategy) -> &BTreeMap<String, f64> {
        match strategy {
            SelectionStrategy::Random => &self.random,
            SelectionStrategy::Relevant => &self.relevant,
        }
    }
}

#[derive(Debug)]
pub enum Fixture {
    Taxonomy(Taxonomy),
    Records(Vec<MetadataRecord>),
    Text(&'static str),
    Counts(BTreeMap<String, u64>),
    Precision(Table3Values),
    Rules(Vec<(String, String)>),
    Replay(ReplayBackend),
}

pub fn load_fixture(name: &str) -> Result<Fixture, FixtureError> {
    match name {
        "taxonomy" => load_taxonomy(TAXONOMY)
            .map(Fixture::Taxonomy)
            .map_err(|e| invalid(name, e.to_string())),
        "synthetic_corpus" => load_synthetic_corpus().map(Fixture::Records),
        "figure2_records" => load_records(name, FIGURE2_RECORDS).map(Fixture::Records),
        "golden_prompt" => Ok(Fixture::Text(GOLDEN_PROMPT)),
        "table2_counts" => load_table2().map(Fixture::Counts),
        "table3_values" => load_table3().map(Fixture::Precision),
        "mock_rules" => RuleMockBackend::parse_rules(MOCK_RULES)
            .map(Fixture::Rules)
            .map_err(|e| invalid(name, e.to_string())),
        "replay_figure2" => ReplayBackend::from_jsonl(BufReader::new(REPLAY_FIGURE2.as_bytes()))
            .map(Fixture::Replay)
            .map_err(|e| invalid(name, e.to_string())),
        other => Err(FixtureError::Missing(other.to_string())),
    }
}

fn load_records(name: &str, source: &str) -> Result<Vec<MetadataRecord>, FixtureError> {
    parse_records(BufReader::new(source.as_bytes()), RecordFormat::Jsonl, ParseMode::Strict)
        .map(|parsed| parsed.records)
        .map_err(|e| invalid(name, e.to_string()))
}

fn load_synthetic_corpus() -> Result<Vec<MetadataRecord>, FixtureError> {
    const NAME: &str = "synthetic_corpus";
    let records = load_records(NAME, SYNTHETIC_CORPUS)?;
    let taxonomy = default_taxonomy();
    let rules = mock_rules();
    if records.len() < 60 {
        return Err(invalid(NAME, format!("{} records, need at least 60", records.len())));
    }
    let mut strata = BTreeMap::new();
    for record in &records {
        let stratum = stratum_of(record, &taxonomy)
            .ok_or_else(|| invalid(NAME, format!("{} has no division", record.id)))?;
        *strata.entry(stratum).or_insert(0) += 1;
        let text = format!("{} {}", record.title, record.description).to_lowercase();
        let recoverable = rules.iter().any(|(keyword, label)| {
            text.contains(&keyword.to_lowercase()) && taxonomy.match_label(label) == Some(stratum)
        });
        if !recoverable {
            return Err(invalid(NAME, format!("no mock rule recovers the division of {}", record.id)));
        }
    }
    if strata.len() < 6 {
        return Err(invalid(NAME, format!("spans {} divisions, need at least 6", strata.len())));
    }
    Ok(records)
}

/// Non-comment lines split on tabs.
fn table_rows(source: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    source
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| (i + 1, l.split('\t').map(str::trim).collect()))
}

fn load_table2() -> Result<BTreeMap<String, u64>, FixtureError> {
    const NAME: &str = "table2_counts";
    let taxonomy = default_taxonomy();
    let mut counts = BTreeMap::new();
    for (line, fields) in table_rows(TABLE2_COUNTS) {
        let [code, count] = fields[..] else {
            return Err(invalid(NAME, format!("line {line}: expected code<TAB>count")));
        };
        if taxonomy.division(code).is_none() {
            return Err(invalid(NAME, format!("line {line}: unknown division {code}")));
        }
        let count: u64 = count
            .parse()
            .map_err(|_| invalid(NAME, format!("line {line}: bad count {count:?}")))?;
        if counts.insert(code.to_string(), count).is_some() {
            return Err(invalid(NAME, format!("line {line}: duplicate division {code}")));
        }
    }
    if counts.len() != taxonomy.len() {
        return Err(invalid(NAME, format!("{} divisions, expected {}", counts.len(), taxonomy.len())));
    }
    let total: u64 = counts.values().sum();
    if total != TABLE2_TOTAL {
        return Err(invalid(NAME, format!("counts sum to {total}, expected {TABLE2_TOTAL}")));
    }
    Ok(counts)
}

fn load_table3() -> Result<Table3Values, FixtureError> {
    const NAME: &str = "table3_values";
    let taxonomy = default_taxonomy();
    let mut random = BTreeMap::new();
    let mut relevant = BTreeMap::new();
    for (line, fields) in table_rows(TABLE3_VALUES) {
        let [code, r, v] = fields[..] else {
            return Err(invalid(NAME, format!("line {line}: expected code<TAB>random<TAB>relevant")));
        };
        if taxonomy.division(code).is_none() {
            return Err(invalid(NAME, format!("line {line}: unknown division {code}")));
        }
        for (column, raw) in [(&mut random, r), (&mut relevant, v)] {
            let value: f64 = raw
                .parse()
                .map_err(|_| invalid(NAME, format!("line {line}: bad precision {raw:?}")))?;
            if !(0.0..=1.0).contains(&value) {
                return Err(invalid(NAME, format!("line {line}: precision {value} outside [0, 1]")));
            }
            if column.insert(code.to_string(), value).is_some() {
                return Err(invalid(NAME, format!("line {line}: duplicate division {code}")));
            }
        }
    }
    if random.len() != 20 {
        return Err(invalid(NAME, format!("{} divisions per strategy, expected 20", random.len())));
    }
    Ok(Table3Values { random, relevant })
}

// Typed accessors for the shipped bundle. They panic only if a shipped file
// is broken, which the tests below rule out.

pub fn default_taxonomy() -> Taxonomy {
    load_taxonomy(TAXONOMY).expect("shipped taxonomy is valid")
}

pub fn synthetic_corpus() -> Vec<MetadataRecord> {
    load_synthetic_corpus().expect("shipped corpus is valid")
}

pub fn figure2_records() -> (MetadataRecord, MetadataRecord) {
    let records = load_records("figure2_records", FIGURE2_RECORDS).expect("shipped records are valid");
    let find = |id: &str| records.iter().find(|r| r.id == id).cloned().expect("record present");
    (find("fig2-target-lorne"), find("fig2-demo-cryptography"))
}

pub fn golden_prompt() -> &'static str {
    GOLDEN_PROMPT
}

pub fn table2_counts() -> BTreeMap<String, u64> {
    load_table2().expect("shipped table is valid")
}

pub fn table3_values() -> Table3Values {
    load_table3().expect("shipped table is valid")
}

pub fn mock_rules() -> Vec<(String, String)> {
    RuleMockBackend::parse_rules(MOCK_RULES).expect("shipped rules are valid")
}

pub fn mock_backend() -> RuleMockBackend {
    RuleMockBackend::new(mock_rules()).expect("shipped rules are non-empty")
}

pub fn replay_figure2() -> ReplayBackend {
    ReplayBackend::from_jsonl(BufReader::new(REPLAY_FIGURE2.as_bytes())).expect("shipped replay fixture is valid")
}

/// A corpus whose per-division availability reproduces `counts` as test
/// counts under a cap of `test_per_division`: divisions at the cap get
/// `extra` additional records for the demonstration pool.
pub fn synthesize_corpus(counts: &BTreeMap<String, u64>, test_per_division: u64, extra: u64) -> Vec<MetadataRecord> {
    let mut records = Vec::new();
    for (code, &count) in counts {
        let available = if count >= test_per_division { count + extra } else { count };
        for i in 0..available {
            records.push(MetadataRecord::new(
                format!("gen-{code}-{i:04}"),
                format!("Generated record {i} for division {code}"),
                format!("Placeholder description {i}."),
                vec![code.clone()],
            ));
        }
    }
    records
}
