//! Precision-based scoring of top-1 predictions against each record's
//! stratum, with a support threshold applied before averaging.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{gold_divisions, stratum_of, MetadataRecord};
use crate::parser::PredictionRecord;
use crate::taxonomy::{SubjectCode, Taxonomy, OTHERS};

pub const DEFAULT_MIN_SUPPORT: u64 = 20;

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("true code {0:?} is not a division")]
    UnknownTrueCode(String),
    #[error("prediction for unknown record {0:?}")]
    UnknownRecord(String),
    #[error("record {0:?} has no division among its subjects")]
    NoStratum(String),
    #[error("more than one prediction for record {0:?}")]
    DuplicatePrediction(String),
    #[error("no class has support >= {min_support} and a defined precision")]
    NothingIncluded { min_support: u64 },
    #[error("unsupported report format {0:?}")]
    UnsupportedFormat(String),
    #[error("reports cover different division sets")]
    DivisionMismatch,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// A prediction is correct only if it equals the record's stratum.
    #[default]
    Stratum,
    /// Diagnostic: any gold division counts as the stratum.
    AnyGold,
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchMode::Stratum => "stratum",
            MatchMode::AnyGold => "any_gold",
        })
    }
}

impl FromStr for MatchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stratum" => Ok(MatchMode::Stratum),
            "any_gold" | "any-gold" => Ok(MatchMode::AnyGold),
            other => Err(format!("unknown match mode {other:?} (expected stratum or any_gold)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPrediction {
    pub record_id: String,
    pub true_code: String,
    pub predicted_code: SubjectCode,
    pub gold_codes: Vec<String>,
}

/// Rows are true divisions in taxonomy order; columns are the same
/// divisions followed by `others`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cells: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    fn zeros(taxonomy: &Taxonomy) -> Self {
        let rows: Vec<String> = taxonomy.codes().map(str::to_string).collect();
        let mut columns = rows.clone();
        columns.push(OTHERS.to_string());
        let cells = vec![vec![0; columns.len()]; rows.len()];
        Self { rows, columns, cells }
    }

    fn row_index(&self, code: &str) -> Option<usize> {
        self.rows.iter().position(|r| r == code)
    }

    fn column_index(&self, code: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == code)
    }

    pub fn get(&self, true_code: &str, predicted: &str) -> u64 {
        match (self.row_index(true_code), self.column_index(predicted)) {
            (Some(r), Some(c)) => self.cells[r][c],
            _ => 0,
        }
    }

    pub fn row_sum(&self, true_code: &str) -> u64 {
        self.row_index(true_code).map_or(0, |r| self.cells[r].iter().sum())
    }

    pub fn column_sum(&self, predicted: &str) -> u64 {
        self.column_index(predicted)
            .map_or(0, |c| self.cells.iter().map(|row| row[c]).sum())
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().flatten().sum()
    }

    pub fn diagonal(&self) -> u64 {
        self.rows.iter().map(|code| self.get(code, code)).sum()
    }
}

pub fn confusion_matrix(pairs: &[LabeledPrediction], taxonomy: &Taxonomy) -> Result<ConfusionMatrix, EvaluationError> {
    let mut matrix = ConfusionMatrix::zeros(taxonomy);
    for pair in pairs {
        let row = matrix
            .row_index(&pair.true_code)
            .ok_or_else(|| EvaluationError::UnknownTrueCode(pair.true_code.clone()))?;
        let col = matrix
            .column_index(pair.predicted_code.as_str())
            .unwrap_or(matrix.columns.len() - 1);
        matrix.cells[row][col] += 1;
    }
    Ok(matrix)
}

/// `TP(c) / column_sum(c)` per division; `None` when `c` was never predicted.
pub fn precision_scores(matrix: &ConfusionMatrix) -> BTreeMap<String, Option<f64>> {
    matrix
        .rows
        .iter()
        .map(|code| {
            let predicted = matrix.column_sum(code);
            let precision = (predicted > 0).then(|| matrix.get(code, code) as f64 / predicted as f64);
            (code.clone(), precision)
        })
        .collect()
}

/// Per-class input to [`aggregate`]. Counts are absent when only published
/// precisions are known, in which case no micro average can be formed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub code: String,
    pub support: u64,
    pub precision: Option<f64>,
    pub true_positives: Option<u64>,
    pub predicted: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum ExclusionReason {
    LowSupport { support: u64, min_support: u64 },
    NeverPredicted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub code: String,
    #[serde(flatten)]
    pub reason: ExclusionReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub macro_precision: f64,
    pub micro_precision: Option<f64>,
    pub std_dev: f64,
    /// Set when only one class is included and the sample deviation is
    /// undefined; `std_dev` is then reported as 0.
    pub std_dev_degenerate: bool,
    pub included: Vec<String>,
    pub excluded: Vec<Exclusion>,
}

/// Classes with zero support are neither included nor excluded.
pub fn aggregate(scores: &[ClassScore], min_support: u64) -> Result<Aggregate, EvaluationError> {
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    let mut values = Vec::new();
    for score in scores.iter().filter(|s| s.support > 0) {
        if score.support < min_support {
            excluded.push(Exclusion {
                code: score.code.clone(),
                reason: ExclusionReason::LowSupport {
                    support: score.support,
                    min_support,
                },
            });
        } else if let Some(p) = score.precision {
            included.push(score.code.clone());
            values.push((score, p));
        } else {
            excluded.push(Exclusion {
                code: score.code.clone(),
                reason: ExclusionReason::NeverPredicted,
            });
        }
    }
    if values.is_empty() {
        return Err(EvaluationError::NothingIncluded { min_support });
    }

    let n = values.len() as f64;
    let macro_precision = values.iter().map(|(_, p)| p).sum::<f64>() / n;
    let (std_dev, std_dev_degenerate) = if values.len() > 1 {
        let ss: f64 = values.iter().map(|(_, p)| (p - macro_precision).powi(2)).sum();
        ((ss / (n - 1.0)).sqrt(), false)
    } else {
        (0.0, true)
    };
    let micro_precision = values
        .iter()
        .map(|(s, _)| s.true_positives.zip(s.predicted))
        .collect::<Option<Vec<_>>>()
        .map(|counts| {
            let tp: u64 = counts.iter().map(|(tp, _)| tp).sum();
            let predicted: u64 = counts.iter().map(|(_, p)| p).sum();
            tp as f64 / predicted as f64
        });
    Ok(Aggregate {
        macro_precision,
        micro_precision,
        std_dev,
        std_dev_degenerate,
        included,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub match_mode: MatchMode,
    pub min_support: u64,
    pub evaluated: u64,
    /// Test records with no prediction, e.g. after a failed request.
    pub unscored_records: Vec<String>,
    pub labels: BTreeMap<String, String>,
    pub per_class_precision: BTreeMap<String, Option<f64>>,
    pub support: BTreeMap<String, u64>,
    pub predicted_count: BTreeMap<String, u64>,
    pub true_positives: BTreeMap<String, u64>,
    pub macro_precision: f64,
    /// Pooled over included classes only.
    pub micro_precision: f64,
    /// Pooled over every prediction, `others` included; equals accuracy.
    pub micro_precision_all: f64,
    pub std_dev: f64,
    pub std_dev_degenerate: bool,
    pub included_classes: Vec<String>,
    pub excluded_classes: Vec<Exclusion>,
    pub dropped_tokens: u64,
    pub truncated_replies: u64,
    pub confusion: ConfusionMatrix,
}

pub fn labeled_predictions(
    predictions: &[PredictionRecord],
    records: &[MetadataRecord],
    taxonomy: &Taxonomy,
    match_mode: MatchMode,
) -> Result<Vec<LabeledPrediction>, EvaluationError> {
    let by_id: HashMap<&str, &MetadataRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::with_capacity(predictions.len());
    for prediction in predictions {
        if !seen.insert(prediction.record_id.as_str()) {
            return Err(EvaluationError::DuplicatePrediction(prediction.record_id.clone()));
        }
        let record = by_id
            .get(prediction.record_id.as_str())
            .ok_or_else(|| EvaluationError::UnknownRecord(prediction.record_id.clone()))?;
        let stratum = stratum_of(record, taxonomy).ok_or_else(|| EvaluationError::NoStratum(record.id.clone()))?;
        let gold: Vec<String> = gold_divisions(record, taxonomy).into_iter().map(str::to_string).collect();
        let mut predicted = prediction.top1().clone();
        if match_mode == MatchMode::AnyGold && gold.iter().any(|g| g == predicted.as_str()) {
            predicted = SubjectCode::Division(stratum.to_string());
        }
        pairs.push(LabeledPrediction {
            record_id: record.id.clone(),
            true_code: stratum.to_string(),
            predicted_code: predicted,
            gold_codes: gold,
        });
    }
    Ok(pairs)
}

pub fn evaluate_run(
    predictions: &[PredictionRecord],
    records: &[MetadataRecord],
    taxonomy: &Taxonomy,
    match_mode: MatchMode,
    min_support: u64,
) -> Result<EvaluationReport, EvaluationError> {
    let pairs = labeled_predictions(predictions, records, taxonomy, match_mode)?;
    let confusion = confusion_matrix(&pairs, taxonomy)?;
    let per_class_precision = precision_scores(&confusion);

    let scores: Vec<ClassScore> = confusion
        .rows
        .iter()
        .map(|code| ClassScore {
            code: code.clone(),
            support: confusion.row_sum(code),
            precision: per_class_precision[code],
            true_positives: Some(confusion.get(code, code)),
            predicted: Some(confusion.column_sum(code)),
        })
        .collect();
    let agg = aggregate(&scores, min_support)?;

    let predicted_ids: BTreeSet<&str> = predictions.iter().map(|p| p.record_id.as_str()).collect();
    let total = confusion.total();
    Ok(EvaluationReport {
        match_mode,
        min_support,
        evaluated: total,
        unscored_records: records
            .iter()
            .filter(|r| !predicted_ids.contains(r.id.as_str()))
            .map(|r| r.id.clone())
            .collect(),
        labels: taxonomy
            .divisions()
            .iter()
            .map(|d| (d.code.clone(), d.label.clone()))
            .collect(),
        per_class_precision,
        support: scores.iter().map(|s| (s.code.clone(), s.support)).collect(),
        predicted_count: confusion
            .columns
            .iter()
            .map(|c| (c.clone(), confusion.column_sum(c)))
            .collect(),
        true_positives: scores
            .iter()
            .map(|s| (s.code.clone(), s.true_positives.unwrap_or(0)))
            .collect(),
        macro_precision: agg.macro_precision,
        micro_precision: agg.micro_precision.expect("counts are known"),
        micro_precision_all: if total > 0 {
            confusion.diagonal() as f64 / total as f64
        } else {
            0.0
        },
        std_dev: agg.std_dev,
        std_dev_degenerate: agg.std_dev_degenerate,
        included_classes: agg.included,
        excluded_classes: agg.excluded,
        dropped_tokens: predictions.iter().map(|p| p.dropped_tokens.len() as u64).sum(),
        truncated_replies: predictions.iter().filter(|p| p.finish_reason != "stop").count() as u64,
        confusion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = EvaluationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(EvaluationError::UnsupportedFormat(s.to_string())),
        }
    }
}

fn fmt_precision(p: Option<f64>) -> String {
    p.map_or_else(|| "n/a".to_string(), |p| format!("{p:.4}"))
}

pub fn render_report(report: &EvaluationReport, format: ReportFormat) -> Result<String, EvaluationError> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
        ReportFormat::Csv => render_confusion_csv(&report.confusion),
        ReportFormat::Markdown => Ok(render_markdown(report)),
    }
}

fn render_confusion_csv(matrix: &ConfusionMatrix) -> Result<String, EvaluationError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["true\\predicted".to_string()];
    header.extend(matrix.columns.iter().cloned());
    writer.write_record(&header)?;
    for (code, row) in matrix.rows.iter().zip(&matrix.cells) {
        let mut line = vec![code.clone()];
        line.extend(row.iter().map(u64::to_string));
        writer.write_record(&line)?;
    }
    let bytes = writer.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn render_markdown(report: &EvaluationReport) -> String {
    let mut out = String::new();
    let label = |code: &str| report.labels.get(code).map_or("", String::as_str).to_string();
    writeln!(out, "# Evaluation report\n").unwrap();
    writeln!(out, "- match mode: {}", report.match_mode).unwrap();
    writeln!(out, "- evaluated predictions: {}", report.evaluated).unwrap();
    writeln!(out, "- unscored records: {}", report.unscored_records.len()).unwrap();
    writeln!(out, "- minimum support: {}", report.min_support).unwrap();
    writeln!(out, "- dropped reply tokens: {}", report.dropped_tokens).unwrap();
    writeln!(out, "- truncated replies: {}\n", report.truncated_replies).unwrap();

    writeln!(out, "| Code | Division | Support | Predicted | Precision |").unwrap();
    writeln!(out, "| --- | --- | ---: | ---: | ---: |").unwrap();
    for code in &report.included_classes {
        writeln!(
            out,
            "| {code} | {} | {} | {} | {} |",
            label(code),
            report.support[code],
            report.predicted_count[code],
            fmt_precision(report.per_class_precision[code]),
        )
        .unwrap();
    }
    writeln!(out, "| Macro Average | | | | {:.4} |", report.macro_precision).unwrap();
    writeln!(out, "| Micro Average | | | | {:.4} |", report.micro_precision).unwrap();
    let flag = if report.std_dev_degenerate { " (single class)" } else { "" };
    writeln!(out, "| Standard Deviation | | | | {:.4}{flag} |", report.std_dev).unwrap();
    writeln!(
        out,
        "\nMicro average over all predictions, `{OTHERS}` included: {:.4}",
        report.micro_precision_all
    )
    .unwrap();

    if !report.excluded_classes.is_empty() {
        writeln!(out, "\n## Excluded classes\n").unwrap();
        for exclusion in &report.excluded_classes {
            let why = match &exclusion.reason {
                ExclusionReason::LowSupport { support, min_support } => {
                    format!("support {support} below {min_support}")
                }
                ExclusionReason::NeverPredicted => "never predicted, precision undefined".to_string(),
            };
            writeln!(out, "- {} {}: {why}", exclusion.code, label(&exclusion.code)).unwrap();
        }
    }

    let matrix = &report.confusion;
    writeln!(out, "\n## Confusion matrix\n\nRows are true divisions, columns predicted.\n").unwrap();
    writeln!(out, "| true \\ predicted | {} |", matrix.columns.join(" | ")).unwrap();
    writeln!(out, "| --- |{}", " ---: |".repeat(matrix.columns.len())).unwrap();
    for (code, row) in matrix.rows.iter().zip(&matrix.cells) {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        writeln!(out, "| {code} | {} |", cells.join(" | ")).unwrap();
    }
    out
}

/// The parts of a report that two runs can be compared on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub name: String,
    pub divisions: Vec<String>,
    pub per_class_precision: BTreeMap<String, Option<f64>>,
    pub included_classes: Vec<String>,
    pub macro_precision: f64,
    pub micro_precision: Option<f64>,
    pub std_dev: f64,
}

impl ScoreSummary {
    pub fn from_report(name: impl Into<String>, report: &EvaluationReport) -> Self {
        Self {
            name: name.into(),
            divisions: report.confusion.rows.clone(),
            per_class_precision: report.per_class_precision.clone(),
            included_classes: report.included_classes.clone(),
            macro_precision: report.macro_precision,
            micro_precision: Some(report.micro_precision),
            std_dev: report.std_dev,
        }
    }

    /// Builds a summary from per-class scores alone, e.g. published values.
    pub fn from_scores(
        name: impl Into<String>,
        taxonomy: &Taxonomy,
        scores: &[ClassScore],
        min_support: u64,
    ) -> Result<Self, EvaluationError> {
        let agg = aggregate(scores, min_support)?;
        let by_code: HashMap<&str, Option<f64>> = scores.iter().map(|s| (s.code.as_str(), s.precision)).collect();
        Ok(Self {
            name: name.into(),
            divisions: taxonomy.codes().map(str::to_string).collect(),
            per_class_precision: taxonomy
                .codes()
                .map(|c| (c.to_string(), by_code.get(c).copied().flatten()))
                .collect(),
            included_classes: agg.included,
            macro_precision: agg.macro_precision,
            micro_precision: agg.micro_precision,
            std_dev: agg.std_dev,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Change {
    Improved,
    Regressed,
    Unchanged,
    Undefined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDelta {
    pub code: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub delta: Option<f64>,
    pub change: Change,
}

/// Deltas are `b - a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub classes: Vec<ClassDelta>,
    pub macro_delta: f64,
    pub micro_delta: Option<f64>,
    pub std_dev_delta: f64,
}

const UNCHANGED_EPSILON: f64 = 1e-12;

pub fn compare(a: &ScoreSummary, b: &ScoreSummary) -> Result<Comparison, EvaluationError> {
    if a.divisions != b.divisions {
        return Err(EvaluationError::DivisionMismatch);
    }
    let classes = a
        .divisions
        .iter()
        .map(|code| {
            let pa = a.per_class_precision.get(code).copied().flatten();
            let pb = b.per_class_precision.get(code).copied().flatten();
            let delta = pa.zip(pb).map(|(x, y)| y - x);
            let change = match delta {
                None => Change::Undefined,
                Some(d) if d > UNCHANGED_EPSILON => Change::Improved,
                Some(d) if d < -UNCHANGED_EPSILON => Change::Regressed,
                Some(_) => Change::Unchanged,
            };
            ClassDelta {
                code: code.clone(),
                a: pa,
                b: pb,
                delta,
                change,
            }
        })
        .collect();
    Ok(Comparison {
        a: a.name.clone(),
        b: b.name.clone(),
        classes,
        macro_delta: b.macro_precision - a.macro_precision,
        micro_delta: a.micro_precision.zip(b.micro_precision).map(|(x, y)| y - x),
        std_dev_delta: b.std_dev - a.std_dev,
    })
}

pub fn render_comparison(cmp: &Comparison) -> String {
    let signed = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:+.4}"));
    let mut out = String::new();
    writeln!(out, "# {} vs {}\n", cmp.b, cmp.a).unwrap();
    writeln!(out, "| Code | {} | {} | Delta | Change |", cmp.a, cmp.b).unwrap();
    writeln!(out, "| --- | ---: | ---: | ---: | --- |").unwrap();
    for c in cmp.classes.iter().filter(|c| c.a.is_some() || c.b.is_some()) {
        let change = match c.change {
            Change::Improved => "improved",
            Change::Regressed => "regressed",
            Change::Unchanged => "unchanged",
            Change::Undefined => "n/a",
        };
        writeln!(
            out,
            "| {} | {} | {} | {} | {change} |",
            c.code,
            fmt_precision(c.a),
            fmt_precision(c.b),
            signed(c.delta)
        )
        .unwrap();
    }
    writeln!(out, "| Macro Average | | | {} | |", signed(Some(cmp.macro_delta))).unwrap();
    writeln!(out, "| Micro Average | | | {} | |", signed(cmp.micro_delta)).unwrap();
    writeln!(out, "| Standard Deviation | | | {} | |", signed(Some(cmp.std_dev_delta))).unwrap();
    let improved = cmp.classes.iter().filter(|c| c.change == Change::Improved).count();
    let regressed = cmp.classes.iter().filter(|c| c.change == Change::Regressed).count();
    writeln!(out, "\n{improved} classes improved, {regressed} regressed.").unwrap();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::parser::ReplyShape;
    use proptest::prelude::*;

    fn tax() -> Taxonomy {
        fixtures::default_taxonomy()
    }

    fn pair(t: &str, p: &str) -> LabeledPrediction {
        LabeledPrediction {
            record_id: format!("{t}-{p}"),
            true_code: t.to_string(),
            predicted_code: if p == OTHERS {
                SubjectCode::Others
            } else {
                SubjectCode::Division(p.to_string())
            },
            gold_codes: vec![t.to_string()],
        }
    }

    #[test]
    fn hand_counted_matrix() {
        let m = confusion_matrix(&[pair("04", "04"), pair("04", "09"), pair("09", "04")], &tax()).unwrap();
        assert_eq!(m.get("04", "04"), 1);
        assert_eq!(m.get("04", "09"), 1);
        assert_eq!(m.get("09", "04"), 1);
        assert_eq!(m.total(), 3);
        assert_eq!(m.columns.last().unwrap(), OTHERS);
        assert_eq!(m.columns.len(), 23);

        assert_eq!(confusion_matrix(&[], &tax()).unwrap().total(), 0);
        let all_others = confusion_matrix(&[pair("01", OTHERS), pair("05", OTHERS)], &tax()).unwrap();
        assert_eq!(all_others.column_sum(OTHERS), 2);
        assert_eq!(all_others.diagonal(), 0);

        assert!(matches!(
            confusion_matrix(&[pair("99", "04")], &tax()),
            Err(EvaluationError::UnknownTrueCode(_))
        ));
    }

    #[test]
    fn precision_from_columns() {
        let mut pairs = vec![pair("04", "04"); 3];
        pairs.push(pair("09", "04"));
        let p = precision_scores(&confusion_matrix(&pairs, &tax()).unwrap());
        assert_eq!(p["04"], Some(0.75));
        assert_eq!(p["09"], None);
        assert!(!p.contains_key(OTHERS));

        let diag: Vec<_> = ["01", "02", "03"].iter().map(|c| pair(c, c)).collect();
        let p = precision_scores(&confusion_matrix(&diag, &tax()).unwrap());
        assert!(p.values().flatten().all(|&v| v == 1.0));
    }

    fn score(code: &str, support: u64, precision: Option<f64>) -> ClassScore {
        ClassScore {
            code: code.into(),
            support,
            precision,
            true_positives: None,
            predicted: None,
        }
    }

    #[test]
    fn aggregate_uses_sample_deviation() {
        // values 0.2, 0.4, 0.6: mean 0.4, sample sd 0.2
        let scores = [score("01", 30, Some(0.2)), score("02", 30, Some(0.4)), score("03", 30, Some(0.6))];
        let a = aggregate(&scores, 20).unwrap();
        assert!((a.macro_precision - 0.4).abs() < 1e-12);
        assert!((a.std_dev - 0.2).abs() < 1e-12);
        assert_eq!(a.micro_precision, None);
    }

    #[test]
    fn aggregate_exclusions() {
        let scores = [
            score("01", 30, Some(0.5)),
            score("02", 7, Some(1.0)),
            score("03", 25, None),
            score("04", 0, None),
        ];
        let a = aggregate(&scores, 20).unwrap();
        assert_eq!(a.included, ["01"]);
        assert_eq!(a.excluded.len(), 2);
        assert_eq!(a.excluded[0].reason, ExclusionReason::LowSupport { support: 7, min_support: 20 });
        assert_eq!(a.excluded[1].reason, ExclusionReason::NeverPredicted);
        assert!(a.std_dev_degenerate);
        assert_eq!(a.std_dev, 0.0);
        assert_eq!(a.macro_precision, 0.5);

        assert!(matches!(
            aggregate(&[score("01", 3, Some(1.0))], 20),
            Err(EvaluationError::NothingIncluded { .. })
        ));
    }

    #[test]
    fn single_class_macro_equals_micro() {
        let s = ClassScore {
            code: "04".into(),
            support: 40,
            precision: Some(0.75),
            true_positives: Some(30),
            predicted: Some(40),
        };
        let a = aggregate(&[s], 20).unwrap();
        assert_eq!(a.macro_precision, 0.75);
        assert_eq!(a.micro_precision, Some(0.75));
    }

    fn prediction(id: &str, code: &str) -> PredictionRecord {
        PredictionRecord {
            record_id: id.into(),
            codes: vec![if code == OTHERS {
                SubjectCode::Others
            } else {
                SubjectCode::Division(code.into())
            }],
            raw: String::new(),
            dropped_tokens: vec![],
            shape: ReplyShape::Slash,
            finish_reason: "stop".into(),
        }
    }

    fn records() -> Vec<MetadataRecord> {
        vec![
            MetadataRecord::new("a", "t", "d", vec!["04".into()]),
            MetadataRecord::new("b", "t", "d", vec!["040302".into(), "05".into()]),
            MetadataRecord::new("c", "t", "d", vec!["05".into()]),
        ]
    }

    #[test]
    fn perfect_run() {
        let preds = [prediction("a", "04"), prediction("b", "04"), prediction("c", "05")];
        let r = evaluate_run(&preds, &records(), &tax(), MatchMode::Stratum, 1).unwrap();
        assert_eq!(r.macro_precision, 1.0);
        assert_eq!(r.micro_precision, 1.0);
        assert_eq!(r.micro_precision_all, 1.0);
        assert_eq!(r.included_classes, ["04", "05"]);
        assert!(r.unscored_records.is_empty());
    }

    #[test]
    fn any_gold_credits_secondary_codes() {
        let preds = [prediction("a", "04"), prediction("b", "05"), prediction("c", "05")];
        let strict = evaluate_run(&preds, &records(), &tax(), MatchMode::Stratum, 1).unwrap();
        assert_eq!(strict.confusion.get("04", "05"), 1);
        let lenient = evaluate_run(&preds, &records(), &tax(), MatchMode::AnyGold, 1).unwrap();
        assert_eq!(lenient.confusion.get("04", "04"), 2);
        assert_eq!(lenient.macro_precision, 1.0);
    }

    #[test]
    fn join_errors() {
        let recs = records();
        assert!(matches!(
            evaluate_run(&[prediction("zzz", "04")], &recs, &tax(), MatchMode::Stratum, 1),
            Err(EvaluationError::UnknownRecord(_))
        ));
        assert!(matches!(
            evaluate_run(&[prediction("a", "04"), prediction("a", "04")], &recs, &tax(), MatchMode::Stratum, 1),
            Err(EvaluationError::DuplicatePrediction(_))
        ));
        let partial = evaluate_run(&[prediction("a", "04")], &recs, &tax(), MatchMode::Stratum, 1).unwrap();
        assert_eq!(partial.unscored_records, ["b", "c"]);
    }

    fn sample_report() -> EvaluationReport {
        let preds = [prediction("a", "04"), prediction("b", OTHERS), prediction("c", "04")];
        evaluate_run(&preds, &records(), &tax(), MatchMode::Stratum, 1).unwrap()
    }

    #[test]
    fn markdown_structure() {
        let r = sample_report();
        let md = render_report(&r, ReportFormat::Markdown).unwrap();
        for code in &r.included_classes {
            assert_eq!(md.matches(&format!("\n| {code} | ")).count(), 2, "table row and matrix row");
        }
        assert_eq!(md.matches("| Macro Average |").count(), 1);
        assert_eq!(md.matches("| Micro Average |").count(), 1);
        assert!(md.contains("- 05 environmental sciences: never predicted"));
    }

    #[test]
    fn csv_conserves_cells() {
        let r = sample_report();
        let csv_text = render_report(&r, ReportFormat::Csv).unwrap();
        let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
        assert_eq!(reader.headers().unwrap().len(), 24);
        let sum: u64 = reader
            .records()
            .map(|row| row.unwrap().iter().skip(1).map(|c| c.parse::<u64>().unwrap()).sum::<u64>())
            .sum();
        assert_eq!(sum, r.evaluated);
    }

    #[test]
    fn json_round_trip() {
        let r = sample_report();
        let json = render_report(&r, ReportFormat::Json).unwrap();
        let back: EvaluationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert!(matches!("xml".parse::<ReportFormat>(), Err(EvaluationError::UnsupportedFormat(_))));
    }

    #[test]
    fn compare_deltas() {
        let r = sample_report();
        let a = ScoreSummary::from_report("a", &r);
        let same = compare(&a, &a).unwrap();
        assert_eq!(same.macro_delta, 0.0);
        assert!(same.classes.iter().all(|c| matches!(c.change, Change::Unchanged | Change::Undefined)));

        let mut b = a.clone();
        b.name = "b".into();
        b.macro_precision += 0.1;
        let cmp = compare(&a, &b).unwrap();
        assert!((cmp.macro_delta - 0.1).abs() < 1e-12);
        assert!(render_comparison(&cmp).contains("| Macro Average | | | +0.1000 | |"));

        b.divisions.pop();
        assert!(matches!(compare(&a, &b), Err(EvaluationError::DivisionMismatch)));
    }

    fn brute_accuracy(pairs: &[(usize, usize)]) -> f64 {
        let mut hits = 0;
        for (t, p) in pairs {
            if t == p {
                hits += 1;
            }
        }
        hits as f64 / pairs.len() as f64
    }

    proptest! {
        #[test]
        fn unfiltered_micro_is_accuracy(raw in proptest::collection::vec((0usize..5, 0usize..6), 1..40)) {
            let codes = ["01", "02", "03", "04", "05", OTHERS];
            let recs: Vec<MetadataRecord> = raw
                .iter()
                .enumerate()
                .map(|(i, (t, _))| MetadataRecord::new(format!("r{i}"), "t", "d", vec![codes[*t].to_string()]))
                .collect();
            let preds: Vec<PredictionRecord> = raw
                .iter()
                .enumerate()
                .map(|(i, (_, p))| prediction(&format!("r{i}"), codes[*p]))
                .collect();
            match evaluate_run(&preds, &recs, &tax(), MatchMode::Stratum, 0) {
                Ok(r) => {
                    prop_assert!((r.micro_precision_all - brute_accuracy(&raw)).abs() < 1e-12);
                    prop_assert_eq!(r.confusion.total(), raw.len() as u64);
                    for code in &r.confusion.rows {
                        prop_assert_eq!(r.confusion.row_sum(code), r.support[code]);
                    }
                    prop_assert!(r.per_class_precision.values().flatten().all(|p| (0.0..=1.0).contains(p)));
                    let nonzero: BTreeSet<&String> = r.support.iter().filter(|(_, &s)| s > 0).map(|(c, _)| c).collect();
                    let mut covered: BTreeSet<&String> = r.included_classes.iter().collect();
                    for e in &r.excluded_classes {
                        prop_assert!(covered.insert(&e.code));
                    }
                    prop_assert_eq!(covered, nonzero);
                }
                Err(EvaluationError::NothingIncluded { .. }) => {
                    // every predicted class missed; nothing to average
                    prop_assert!(raw.iter().all(|(t, p)| t != p));
                }
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }

        #[test]
        fn macro_ignores_pair_order(raw in proptest::collection::vec((0usize..4, 0usize..4), 1..30), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let codes = ["01", "02", "03", "04"];
            let mut pairs: Vec<LabeledPrediction> = raw.iter().map(|(t, p)| pair(codes[*t], codes[*p])).collect();
            let before = precision_scores(&confusion_matrix(&pairs, &tax()).unwrap());
            pairs.shuffle(&mut crate::seed::scoped_rng(seed, "pairs"));
            prop_assert_eq!(before, precision_scores(&confusion_matrix(&pairs, &tax()).unwrap()));
        }
    }
}
