//! Turns a raw model reply into at most three division codes.
//!
//! Two reply shapes occur in practice: a slash-separated line
//! (`"Environmental Sciences / Chemical Sciences."`) and a numbered list,
//! usually preceded by a sentence ending in a colon. Tokens are matched
//! exactly against normalized division labels; anything else is dropped.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::taxonomy::{normalize_label, SubjectCode, Taxonomy};

pub const MAX_CODES: usize = 3;

const MARKER: &str = "categories:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplyShape {
    Slash,
    Numbered,
    Empty,
}

impl fmt::Display for ReplyShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReplyShape::Slash => "slash",
            ReplyShape::Numbered => "numbered",
            ReplyShape::Empty => "empty",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub codes: Vec<SubjectCode>,
    pub raw: String,
    pub dropped_tokens: Vec<String>,
    pub shape: ReplyShape,
}

impl Prediction {
    /// The most relevant label, which is the one scored.
    pub fn top1(&self) -> &SubjectCode {
        &self.codes[0]
    }
}

/// Splits `"12. text"` into the text after the number, if the line is
/// numbered.
fn strip_number(line: &str) -> Option<&str> {
    let trimmed = line.trim_start();
    let digits = trimmed.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 && trimmed[digits..].starts_with('.') {
        Some(&trimmed[digits + 1..])
    } else {
        None
    }
}

pub fn parse_response(raw: &str, taxonomy: &Taxonomy) -> Prediction {
    // ASCII lowercasing keeps byte offsets aligned with `raw`.
    let body = match raw.to_ascii_lowercase().rfind(MARKER) {
        Some(at) => &raw[at + MARKER.len()..],
        None => raw,
    };
    let lines: Vec<&str> = body.lines().collect();
    let start = lines
        .iter()
        .rposition(|l| l.trim_end().ends_with(':'))
        .map_or(0, |i| i + 1);
    let lines: Vec<&str> = lines[start..].iter().copied().filter(|l| !l.trim().is_empty()).collect();

    let numbered = lines.first().is_some_and(|l| strip_number(l).is_some());
    let tokens: Vec<&str> = if numbered {
        lines.iter().map(|l| strip_number(l).unwrap_or(l)).collect()
    } else {
        lines.iter().flat_map(|l| l.split('/')).collect()
    };

    let mut codes: Vec<SubjectCode> = Vec::new();
    let mut dropped_tokens = Vec::new();
    let mut any_token = false;
    for token in tokens {
        let normalized = normalize_label(token);
        if normalized.is_empty() {
            continue;
        }
        any_token = true;
        match taxonomy.match_label(&normalized) {
            Some(code) => {
                let code = SubjectCode::Division(code.to_string());
                if !codes.contains(&code) {
                    codes.push(code);
                }
            }
            None => dropped_tokens.push(normalized),
        }
    }
    codes.truncate(MAX_CODES);
    if codes.is_empty() {
        codes.push(SubjectCode::Others);
    }
    let shape = match (any_token, numbered) {
        (false, _) => ReplyShape::Empty,
        (true, true) => ReplyShape::Numbered,
        (true, false) => ReplyShape::Slash,
    };
    Prediction {
        codes,
        raw: raw.to_string(),
        dropped_tokens,
        shape,
    }
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub record_id: String,
    pub codes: Vec<SubjectCode>,
    pub raw: String,
    pub dropped_tokens: Vec<String>,
    pub shape: ReplyShape,
    pub finish_reason: String,
}

impl PredictionRecord {
    pub fn new(record_id: impl Into<String>, prediction: Prediction, finish_reason: impl Into<String>) -> Self {
        Self {
            record_id: record_id.into(),
            codes: prediction.codes,
            raw: prediction.raw,
            dropped_tokens: prediction.dropped_tokens,
            shape: prediction.shape,
            finish_reason: finish_reason.into(),
        }
    }

    pub fn top1(&self) -> &SubjectCode {
        &self.codes[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::taxonomy::Division;
    use proptest::prelude::*;

    fn tax() -> Taxonomy {
        fixtures::default_taxonomy()
    }

    fn codes(p: &Prediction) -> Vec<&str> {
        p.codes.iter().map(SubjectCode::as_str).collect()
    }

    #[test]
    fn api_reply() {
        let p = parse_response("Environmental Sciences / Chemical Sciences.", &tax());
        assert_eq!(codes(&p), ["05", "03"]);
        assert_eq!(p.shape, ReplyShape::Slash);
        assert_eq!(p.top1().as_str(), "05");
    }

    #[test]
    fn interactive_reply() {
        let raw = "Based on the provided dataset title and description, the relevant categories from the \
                   Australian and New Zealand Standard Research Classification (ANZSRC) are:\n\n\
                   1. Earth Sciences\n2. Environmental Sciences\n3. Biological Sciences";
        let p = parse_response(raw, &tax());
        assert_eq!(codes(&p), ["04", "05", "06"]);
        assert_eq!(p.shape, ReplyShape::Numbered);
        assert!(p.dropped_tokens.is_empty());
        assert_eq!(p.top1().as_str(), "04");
    }

    #[test]
    fn fallbacks() {
        for raw in ["", "Unknown.", "   \n", "Categories:"] {
            let p = parse_response(raw, &tax());
            assert_eq!(p.codes, vec![SubjectCode::Others], "{raw:?}");
        }
        assert_eq!(parse_response("Unknown.", &tax()).dropped_tokens, ["unknown"]);
        assert_eq!(parse_response("", &tax()).shape, ReplyShape::Empty);
    }

    #[test]
    fn dedupes_and_truncates() {
        assert_eq!(codes(&parse_response("earth sciences / earth sciences", &tax())), ["04"]);
        let p = parse_response("Earth Sciences / Chemical Sciences / Earth Sciences / Physical Sciences / Education", &tax());
        assert_eq!(codes(&p), ["04", "03", "02"]);
    }

    #[test]
    fn comma_label_is_one_token() {
        let p = parse_response("commerce, management, tourism and services", &tax());
        assert_eq!(codes(&p), ["15"]);
    }

    #[test]
    fn echoed_prompt_marker_is_skipped() {
        let p = parse_response("Categories: Earth Sciences / geology / Biological Sciences.", &tax());
        assert_eq!(codes(&p), ["04", "06"]);
        assert_eq!(p.dropped_tokens, ["geology"]);
    }

    #[test]
    fn newline_separated_reply() {
        let p = parse_response("Earth Sciences\nHistory and Archaeology", &tax());
        assert_eq!(codes(&p), ["04", "21"]);
    }

    #[test]
    fn record_serializes_expected_fields() {
        let rec = PredictionRecord::new("r1", parse_response("Earth Sciences.", &tax()), "stop");
        let json = serde_json::to_value(&rec).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"record_id":"r1","codes":["04"],"raw":"Earth Sciences.",
                               "dropped_tokens":[],"shape":"slash","finish_reason":"stop"})
        );
        let back: PredictionRecord = serde_json::from_value(json).unwrap();
        assert_eq!(back, rec);
    }

    fn label_of(code: &str) -> String {
        tax().label_of(code).unwrap().to_string()
    }

    proptest! {
        #[test]
        fn total_and_well_formed(raw in "\\PC{0,120}") {
            let p = parse_response(&raw, &tax());
            prop_assert!((1..=MAX_CODES).contains(&p.codes.len()));
            let others = p.codes.iter().filter(|c| c.is_others()).count();
            prop_assert!(others == 0 || p.codes.len() == 1);
            let mut seen = p.codes.clone();
            seen.dedup();
            prop_assert_eq!(seen.len(), p.codes.len());
        }

        #[test]
        fn canonical_rendering_round_trips(picks in proptest::collection::vec(1usize..=22, 1..=3)) {
            let mut wanted: Vec<String> = Vec::new();
            for i in picks {
                let code = format!("{i:02}");
                if !wanted.contains(&code) {
                    wanted.push(code);
                }
            }
            let rendered = format!(
                "{}.",
                wanted.iter().map(|c| label_of(c)).collect::<Vec<_>>().join(" / ")
            );
            let p = parse_response(&rendered, &tax());
            prop_assert_eq!(codes(&p), wanted.iter().map(String::as_str).collect::<Vec<_>>());
        }

        #[test]
        fn independent_of_division_order(raw in "[A-Za-z ,/\\n.]{0,80}", seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let t = tax();
            let mut divisions: Vec<Division> = t.divisions().to_vec();
            divisions.shuffle(&mut crate::seed::scoped_rng(seed, "order"));
            let shuffled = Taxonomy::new(t.scheme_id.clone(), t.version.clone(), divisions, t.descendants().keys().cloned().collect()).unwrap();
            prop_assert_eq!(parse_response(&raw, &t), parse_response(&raw, &shuffled));
        }
    }
}
