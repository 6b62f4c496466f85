//! Controlled vocabulary: a two-digit division scheme with optional
//! four- and six-digit descendants.
//!
//! Classification, prompting and evaluation all operate at division level.
//! Descendant codes are carried so that gold codes such as `"090902"` can be
//! folded onto their division.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sentinel assigned when a reply names no known division.
pub const OTHERS: &str = "others";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("invalid taxonomy json: {0}")]
    Json(String),
    #[error("duplicate division code {0:?}")]
    DuplicateCode(String),
    #[error("duplicate division label {0:?}")]
    DuplicateLabel(String),
    #[error("descendant {code:?} has no parent division {parent:?}")]
    UnknownParent { code: String, parent: String },
    #[error("code {0:?} is not a 2, 4 or 6 digit code")]
    InvalidCode(String),
    #[error("no division {prefix:?} for code {code:?}")]
    UnknownDivision { code: String, prefix: String },
    #[error("taxonomy declares no divisions")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Division {
    pub code: String,
    pub label: String,
}

/// A division code or the `others` sentinel.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SubjectCode {
    Division(String),
    Others,
}

impl SubjectCode {
    pub fn as_str(&self) -> &str {
        match self {
            SubjectCode::Division(code) => code,
            SubjectCode::Others => OTHERS,
        }
    }

    pub fn is_others(&self) -> bool {
        matches!(self, SubjectCode::Others)
    }

    /// Parses a serialized code, checking division membership.
    pub fn parse(value: &str, taxonomy: &Taxonomy) -> Result<Self, TaxonomyError> {
        if value == OTHERS {
            return Ok(SubjectCode::Others);
        }
        if taxonomy.division(value).is_some() {
            Ok(SubjectCode::Division(value.to_string()))
        } else {
            Err(TaxonomyError::UnknownDivision {
                code: value.to_string(),
                prefix: value.chars().take(2).collect(),
            })
        }
    }
}

impl fmt::Display for SubjectCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for SubjectCode {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for SubjectCode {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = String::deserialize(deserializer)?;
        if value == OTHERS {
            Ok(SubjectCode::Others)
        } else if is_division_code(&value) {
            Ok(SubjectCode::Division(value))
        } else {
            Err(serde::de::Error::custom(format!(
                "expected a two-digit division code or {OTHERS:?}, got {value:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    pub scheme_id: String,
    pub version: String,
    divisions: Vec<Division>,
    descendants: BTreeMap<String, String>,
    by_code: HashMap<String, usize>,
    by_label: HashMap<String, usize>,
}

#[derive(Deserialize)]
struct JsonTaxonomy {
    #[serde(default)]
    scheme_id: Option<String>,
    #[serde(default)]
    version: Option<String>,
    divisions: Vec<Division>,
    #[serde(default)]
    descendants: Vec<JsonDescendant>,
}

#[derive(Deserialize)]
struct JsonDescendant {
    code: String,
    #[serde(default)]
    #[allow(dead_code)]
    label: Option<String>,
    #[serde(default)]
    parent: Option<String>,
}

fn is_digits(code: &str) -> bool {
    !code.is_empty() && code.bytes().all(|b| b.is_ascii_digit())
}

pub(crate) fn is_division_code(code: &str) -> bool {
    code.len() == 2 && is_digits(code)
}

/// True for syntactically valid 2, 4 or 6 digit codes.
pub fn is_valid_code(code: &str) -> bool {
    matches!(code.len(), 2 | 4 | 6) && is_digits(code)
}

impl Taxonomy {
    /// Builds a validated taxonomy. Division order is preserved.
    pub fn new(
        scheme_id: impl Into<String>,
        version: impl Into<String>,
        divisions: Vec<Division>,
        descendant_codes: Vec<String>,
    ) -> Result<Self, TaxonomyError> {
        if divisions.is_empty() {
            return Err(TaxonomyError::Empty);
        }
        let mut by_code = HashMap::new();
        let mut by_label = HashMap::new();
        let mut normalized = Vec::with_capacity(divisions.len());
        for (idx, division) in divisions.into_iter().enumerate() {
            if !is_division_code(&division.code) {
                return Err(TaxonomyError::InvalidCode(division.code));
            }
            let label = normalize_label(&division.label);
            if label.is_empty() {
                return Err(TaxonomyError::Malformed {
                    line: idx + 1,
                    reason: format!("division {} has an empty label", division.code),
                });
            }
            if by_code.insert(division.code.clone(), idx).is_some() {
                return Err(TaxonomyError::DuplicateCode(division.code));
            }
            if by_label.insert(label.clone(), idx).is_some() {
                return Err(TaxonomyError::DuplicateLabel(label));
            }
            normalized.push(Division {
                code: division.code,
                label,
            });
        }

        let mut descendants = BTreeMap::new();
        for code in descendant_codes {
            if !matches!(code.len(), 4 | 6) || !is_digits(&code) {
                return Err(TaxonomyError::InvalidCode(code));
            }
            let parent = code[..2].to_string();
            if !by_code.contains_key(&parent) {
                return Err(TaxonomyError::UnknownParent { code, parent });
            }
            descendants.insert(code, parent);
        }

        Ok(Self {
            scheme_id: scheme_id.into(),
            version: version.into(),
            divisions: normalized,
            descendants,
            by_code,
            by_label,
        })
    }

    pub fn divisions(&self) -> &[Division] {
        &self.divisions
    }

    pub fn descendants(&self) -> &BTreeMap<String, String> {
        &self.descendants
    }

    pub fn len(&self) -> usize {
        self.divisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.divisions.is_empty()
    }

    pub fn division(&self, code: &str) -> Option<&Division> {
        self.by_code.get(code).map(|&idx| &self.divisions[idx])
    }

    pub fn label_of(&self, code: &str) -> Option<&str> {
        self.division(code).map(|d| d.label.as_str())
    }

    pub fn codes(&self) -> impl Iterator<Item = &str> {
        self.divisions.iter().map(|d| d.code.as_str())
    }

    /// Exact match of the normalized text against division labels.
    pub fn match_label(&self, text: &str) -> Option<&str> {
        self.by_label
            .get(&normalize_label(text))
            .map(|&idx| self.divisions[idx].code.as_str())
    }

    /// Folds a 2, 4 or 6 digit code onto its division.
    pub fn division_of(&self, code: &str) -> Result<&str, TaxonomyError> {
        if !is_valid_code(code) {
            return Err(TaxonomyError::InvalidCode(code.to_string()));
        }
        let prefix = &code[..2];
        self.by_code
            .get(prefix)
            .map(|&idx| self.divisions[idx].code.as_str())
            .ok_or_else(|| TaxonomyError::UnknownDivision {
                code: code.to_string(),
                prefix: prefix.to_string(),
            })
    }
}

/// Loads either the tab-separated format or its JSON alternative. Input
/// that starts with `{` is treated as JSON.
pub fn load_taxonomy(source: &str) -> Result<Taxonomy, TaxonomyError> {
    if source.trim_start().starts_with('{') {
        load_json(source)
    } else {
        load_tsv(source)
    }
}

fn load_json(source: &str) -> Result<Taxonomy, TaxonomyError> {
    let raw: JsonTaxonomy =
        serde_json::from_str(source).map_err(|e| TaxonomyError::Json(e.to_string()))?;
    let mut codes = Vec::with_capacity(raw.descendants.len());
    for d in raw.descendants {
        if let Some(parent) = d.parent {
            if !d.code.starts_with(&parent) {
                return Err(TaxonomyError::UnknownParent {
                    code: d.code,
                    parent,
                });
            }
        }
        codes.push(d.code);
    }
    Taxonomy::new(
        raw.scheme_id.unwrap_or_default(),
        raw.version.unwrap_or_default(),
        raw.divisions,
        codes,
    )
}

fn load_tsv(source: &str) -> Result<Taxonomy, TaxonomyError> {
    let mut scheme_id = String::new();
    let mut version = String::new();
    let mut divisions = Vec::new();
    let mut descendants = Vec::new();

    for (idx, raw_line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            // `# scheme: x` and `# version: y` carry metadata.
            if let Some((key, value)) = comment.split_once(':') {
                match key.trim() {
                    "scheme" | "scheme_id" => scheme_id = value.trim().to_string(),
                    "version" => version = value.trim().to_string(),
                    _ => {}
                }
            }
            continue;
        }
        let (code, label) = line.split_once('\t').ok_or_else(|| TaxonomyError::Malformed {
            line: line_no,
            reason: "expected <code><TAB><label>".to_string(),
        })?;
        let code = code.trim();
        match code.len() {
            2 if is_digits(code) => {
                if normalize_label(label).is_empty() {
                    return Err(TaxonomyError::Malformed {
                        line: line_no,
                        reason: format!("division {code} has an empty label"),
                    });
                }
                divisions.push(Division {
                    code: code.to_string(),
                    label: label.to_string(),
                });
            }
            4 | 6 if is_digits(code) => descendants.push(code.to_string()),
            _ => {
                return Err(TaxonomyError::Malformed {
                    line: line_no,
                    reason: format!("invalid code {code:?}"),
                })
            }
        }
    }
    Taxonomy::new(scheme_id, version, divisions, descendants)
}

/// Lowercases, trims, collapses internal whitespace and strips trailing
/// sentence punctuation. Internal commas survive.
pub fn normalize_label(text: &str) -> String {
    let lowered = text.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(|c: char| matches!(c, '.' | ',' | ';' | ':') || c.is_whitespace())
        .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use proptest::prelude::*;

    fn shipped() -> Taxonomy {
        fixtures::default_taxonomy()
    }

    #[test]
    fn shipped_scheme_has_22_divisions() {
        let t = shipped();
        assert_eq!(t.len(), 22);
        let codes: Vec<_> = t.codes().collect();
        let expected: Vec<String> = (1..=22).map(|i| format!("{i:02}")).collect();
        assert_eq!(codes, expected);
        assert_eq!(t.scheme_id, "anzsrc-for");
        assert_eq!(t.version, "2008");
        assert_eq!(t.descendants().get("090902").map(String::as_str), Some("09"));
    }

    #[test]
    fn single_division_file() {
        let t = load_taxonomy("01\tMathematical Sciences\n").unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.divisions()[0].label, "mathematical sciences");
    }

    #[test]
    fn duplicate_code_rejected() {
        let err = load_taxonomy("04\tearth sciences\n04\tgeology\n").unwrap_err();
        assert_eq!(err, TaxonomyError::DuplicateCode("04".into()));
    }

    #[test]
    fn duplicate_label_rejected() {
        let err = load_taxonomy("04\tearth sciences\n05\tEarth Sciences.\n").unwrap_err();
        assert_eq!(err, TaxonomyError::DuplicateLabel("earth sciences".into()));
    }

    #[test]
    fn orphan_descendant_rejected() {
        let err = load_taxonomy("04\tearth sciences\n0909\tgeomatic engineering\n").unwrap_err();
        assert!(matches!(err, TaxonomyError::UnknownParent { ref parent, .. } if parent == "09"));
    }

    #[test]
    fn descendant_before_parent_is_fine() {
        let t = load_taxonomy("0403\tgeology\n04\tearth sciences\n").unwrap();
        assert_eq!(t.division_of("0403").unwrap(), "04");
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let err = load_taxonomy("# header\n01 mathematical sciences\n").unwrap_err();
        assert!(matches!(err, TaxonomyError::Malformed { line: 2, .. }));
        let err = load_taxonomy("1\tmaths\n").unwrap_err();
        assert!(matches!(err, TaxonomyError::Malformed { line: 1, .. }));
        assert_eq!(load_taxonomy("# nothing\n").unwrap_err(), TaxonomyError::Empty);
    }

    #[test]
    fn json_alternative() {
        let src = r#"{"scheme_id":"demo","version":"1",
            "divisions":[{"code":"01","label":"Alpha"},{"code":"02","label":"beta, gamma"}],
            "descendants":[{"code":"0201","label":"beta one","parent":"02"}]}"#;
        let t = load_taxonomy(src).unwrap();
        assert_eq!(t.scheme_id, "demo");
        assert_eq!(t.match_label("Beta, Gamma."), Some("02"));
        assert_eq!(t.division_of("0201").unwrap(), "02");

        let bad = r#"{"divisions":[{"code":"01","label":"a"}],"descendants":[{"code":"0201","parent":"01"}]}"#;
        assert!(matches!(load_taxonomy(bad), Err(TaxonomyError::UnknownParent { .. })));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_label("Environmental Sciences."), "environmental sciences");
        assert_eq!(
            normalize_label("commerce, management, tourism and services"),
            "commerce, management, tourism and services"
        );
        assert_eq!(normalize_label("  Earth   Sciences "), "earth sciences");
        assert_eq!(normalize_label(""), "");
        assert_eq!(normalize_label("Law . ;"), "law");
    }

    #[test]
    fn match_examples() {
        let t = shipped();
        assert_eq!(t.match_label("Chemical Sciences"), Some("03"));
        assert_eq!(t.match_label("history and archaeology"), Some("21"));
        assert_eq!(t.match_label("quantum gastronomy"), None);
        assert_eq!(t.match_label("others"), None);
        assert_eq!(t.match_label("earth"), None);
    }

    #[test]
    fn division_of_examples() {
        let t = shipped();
        assert_eq!(t.division_of("0404").unwrap(), "04");
        assert_eq!(t.division_of("09").unwrap(), "09");
        assert!(matches!(
            t.division_of("9901"),
            Err(TaxonomyError::UnknownDivision { ref prefix, .. }) if prefix == "99"
        ));
        assert!(matches!(t.division_of("4"), Err(TaxonomyError::InvalidCode(_))));
    }

    #[test]
    fn every_label_round_trips() {
        let t = shipped();
        for d in t.divisions() {
            assert_eq!(t.match_label(&d.label), Some(d.code.as_str()));
            assert_eq!(t.match_label(&d.label.to_uppercase()), Some(d.code.as_str()));
        }
    }

    #[test]
    fn subject_code_serde() {
        let t = shipped();
        let codes = vec![SubjectCode::Division("05".into()), SubjectCode::Others];
        let json = serde_json::to_string(&codes).unwrap();
        assert_eq!(json, r#"["05","others"]"#);
        let back: Vec<SubjectCode> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, codes);
        assert!(serde_json::from_str::<SubjectCode>(r#""0404""#).is_err());
        assert!(SubjectCode::parse("23", &t).is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "[ a-zA-Z,.;:\t\nÉß]{0,40}") {
            let once = normalize_label(&s);
            prop_assert_eq!(normalize_label(&once), once);
        }

        #[test]
        fn division_of_is_idempotent(div in 1u32..=22, tail in "[0-9]{0,4}") {
            let t = shipped();
            let tail = &tail[..tail.len() / 2 * 2];
            let code = format!("{div:02}{tail}");
            let d = t.division_of(&code).unwrap().to_string();
            prop_assert_eq!(t.division_of(&d).unwrap(), d.as_str());
        }
    }
}
