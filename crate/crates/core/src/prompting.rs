//! Demonstration selection and prompt rendering.
//!
//! A prompt has four parts: an instruction listing every division label, a
//! block of labelled demonstrations, the answer-format rules, and the target
//! record ending in `Categories:`. The text comes from a [`PromptTemplate`]
//! with named placeholders.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{gold_divisions, truncate_for_prompt, MetadataRecord, DEFAULT_DESCRIPTION_BUDGET};
use crate::embedding::{top_k_relevant, DemoIndex, EmbeddingError, EmbeddingVector};
use crate::gateway::{ChatMessage, Role};
use crate::seed::scoped_rng;
use crate::taxonomy::Taxonomy;

pub const DEFAULT_K: usize = 3;
pub const TARGET_SUFFIX: &str = "Categories:";
pub const EXAMPLES_HEADER: &str = "Examples of dataset classification:";
pub const LABEL_SEPARATOR: &str = " / ";

const DEFAULT_TEMPLATE: &str = include_str!("../fixtures/prompt/template.txt");
const DEFAULT_RULES: &str = include_str!("../fixtures/prompt/rules.txt");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template placeholder {{{{{0}}}}} cannot be resolved")]
    UnresolvedPlaceholder(String),
    #[error("template has an unterminated placeholder at byte {0}")]
    UnterminatedPlaceholder(usize),
    #[error("rendered prompt does not end with {TARGET_SUFFIX:?}")]
    MissingSuffix,
    #[error("demonstration pool is empty")]
    EmptyPool,
    #[error("relevant selection needs a demonstration index and a target embedding")]
    MissingIndex,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionStrategy {
    Random,
    Relevant,
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionStrategy::Random => "random",
            SelectionStrategy::Relevant => "relevant",
        })
    }
}

impl FromStr for SelectionStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(SelectionStrategy::Random),
            "relevant" => Ok(SelectionStrategy::Relevant),
            other => Err(format!("unknown strategy {other:?} (expected random or relevant)")),
        }
    }
}

/// Whether random demonstrations are drawn per target record or once per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RandomMode {
    #[default]
    PerTarget,
    PerRun,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub record: MetadataRecord,
    pub rendered_labels: Vec<String>,
}

impl Demonstration {
    /// Labels every gold division of the record. `None` when no gold code
    /// maps onto the taxonomy.
    pub fn from_record(record: &MetadataRecord, taxonomy: &Taxonomy) -> Option<Self> {
        let labels: Vec<String> = gold_divisions(record, taxonomy)
            .into_iter()
            .filter_map(|code| taxonomy.label_of(code).map(str::to_string))
            .collect();
        (!labels.is_empty()).then(|| Self {
            record: record.clone(),
            rendered_labels: labels,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionConfig {
    pub strategy: SelectionStrategy,
    pub k: usize,
    pub seed: u64,
    pub random_mode: RandomMode,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            strategy: SelectionStrategy::Random,
            k: DEFAULT_K,
            seed: 0,
            random_mode: RandomMode::PerTarget,
        }
    }
}

/// Inputs for relevance ranking.
#[derive(Clone, Copy)]
pub struct Relevance<'a> {
    pub index: &'a DemoIndex,
    pub query: &'a EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub demonstrations: Vec<Demonstration>,
    /// Set when fewer than `k` records were eligible.
    pub short: bool,
}

impl Selection {
    pub fn ids(&self) -> Vec<String> {
        self.demonstrations.iter().map(|d| d.record.id.clone()).collect()
    }
}

/// Picks `k` demonstrations for `target`. The target itself (by id) and pool
/// records without a usable label are never candidates.
pub fn select_demonstrations(
    config: &SelectionConfig,
    target: &MetadataRecord,
    pool: &[MetadataRecord],
    taxonomy: &Taxonomy,
    relevance: Option<Relevance<'_>>,
) -> Result<Selection, PromptError> {
    if pool.is_empty() {
        return Err(PromptError::EmptyPool);
    }
    let eligible: Vec<(&MetadataRecord, Demonstration)> = pool
        .iter()
        .filter(|r| r.id != target.id)
        .filter_map(|r| Demonstration::from_record(r, taxonomy).map(|d| (r, d)))
        .collect();
    let short = config.k > eligible.len();
    if short {
        log::warn!(
            "only {} eligible demonstrations for {} (wanted {})",
            eligible.len(),
            target.id,
            config.k
        );
    }

    let demonstrations = match config.strategy {
        SelectionStrategy::Random => {
            let scope = match config.random_mode {
                RandomMode::PerTarget => format!("demos:{}", target.id),
                RandomMode::PerRun => "demos".to_string(),
            };
            let mut rng = scoped_rng(config.seed, &scope);
            // Permute the whole pool so a per-run draw is the same ordering
            // for every target, then skip the target itself.
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut rng);
            let by_id: HashMap<&str, &Demonstration> =
                eligible.iter().map(|(r, d)| (r.id.as_str(), d)).collect();
            order
                .into_iter()
                .filter_map(|i| by_id.get(pool[i].id.as_str()).copied())
                .take(config.k)
                .cloned()
                .collect()
        }
        SelectionStrategy::Relevant => {
            let relevance = relevance.ok_or(PromptError::MissingIndex)?;
            let allowed: HashMap<&str, &Demonstration> =
                eligible.iter().map(|(r, d)| (r.id.as_str(), d)).collect();
            let mut seen = HashSet::new();
            let candidates: DemoIndex = relevance
                .index
                .iter()
                .filter(|(id, _)| allowed.contains_key(id.as_str()) && seen.insert(id.as_str()))
                .cloned()
                .collect();
            top_k_relevant(relevance.query, &candidates, config.k)?
                .iter()
                .map(|id| allowed[id.as_str()].clone())
                .collect()
        }
    };
    Ok(Selection { demonstrations, short })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Placeholder {
    Divisions,
    Examples,
    Rules,
    TargetTitle,
    TargetDescription,
}

impl Placeholder {
    fn parse(name: &str) -> Option<Self> {
        Some(match name.trim() {
            "divisions" => Placeholder::Divisions,
            "examples" => Placeholder::Examples,
            "rules" => Placeholder::Rules,
            "target_title" => Placeholder::TargetTitle,
            "target_description" => Placeholder::TargetDescription,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub body: String,
    pub rules: String,
    /// Send the instruction section as a separate system message.
    #[serde(default)]
    pub system_split: bool,
    pub description_budget: usize,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::new(DEFAULT_TEMPLATE, DEFAULT_RULES)
    }
}

impl PromptTemplate {
    /// Trailing newlines of both files are dropped so the rendered prompt
    /// ends exactly at `Categories:`.
    pub fn new(body: &str, rules: &str) -> Self {
        Self {
            body: body.trim_end_matches(['\n', '\r']).to_string(),
            rules: rules.trim_end_matches(['\n', '\r']).to_string(),
            system_split: false,
            description_budget: DEFAULT_DESCRIPTION_BUDGET,
        }
    }

    pub fn default_rules() -> &'static str {
        DEFAULT_RULES.trim_end_matches(['\n', '\r'])
    }

    pub fn with_system_split(mut self, on: bool) -> Self {
        self.system_split = on;
        self
    }

    pub fn with_description_budget(mut self, budget: usize) -> Self {
        self.description_budget = budget;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptDocument {
    /// Leading section of `text` up to the demonstrations (or rules).
    pub instruction: String,
    pub demonstrations: Vec<Demonstration>,
    pub rules: String,
    pub target: MetadataRecord,
    pub strategy: Option<SelectionStrategy>,
    pub demo_ids: Vec<String>,
    pub text: String,
    pub system_split: bool,
}

fn render_examples(demos: &[Demonstration], budget: usize) -> String {
    if demos.is_empty() {
        return String::new();
    }
    let mut out = format!("{EXAMPLES_HEADER}\n\n");
    for (n, demo) in demos.iter().enumerate() {
        out.push_str(&format!(
            "{}. Dataset title: {} Dataset description: {} Categories: {}.\n\n",
            n + 1,
            demo.record.title,
            truncate_for_prompt(&demo.record.description, budget),
            demo.rendered_labels.join(LABEL_SEPARATOR),
        ));
    }
    out
}

/// Renders the prompt. Output bytes depend only on the arguments.
pub fn render_prompt(
    target: &MetadataRecord,
    demos: &[Demonstration],
    taxonomy: &Taxonomy,
    template: &PromptTemplate,
) -> Result<PromptDocument, PromptError> {
    let body = template.body.as_str();
    let mut text = String::with_capacity(body.len() + 4096);
    let mut instruction_end = None;
    let mut rest = body;
    let mut offset = 0;
    while let Some(start) = rest.find("{{") {
        text.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or(PromptError::UnterminatedPlaceholder(offset + start))?;
        let name = &after[..end];
        let placeholder =
            Placeholder::parse(name).ok_or_else(|| PromptError::UnresolvedPlaceholder(name.to_string()))?;
        if matches!(placeholder, Placeholder::Examples | Placeholder::Rules) && instruction_end.is_none() {
            instruction_end = Some(text.len());
        }
        match placeholder {
            Placeholder::Divisions => {
                let labels: Vec<&str> = taxonomy.divisions().iter().map(|d| d.label.as_str()).collect();
                text.push_str(&labels.join(LABEL_SEPARATOR));
            }
            Placeholder::Examples => text.push_str(&render_examples(demos, template.description_budget)),
            Placeholder::Rules => text.push_str(&template.rules),
            Placeholder::TargetTitle => text.push_str(&target.title),
            Placeholder::TargetDescription => {
                text.push_str(&truncate_for_prompt(&target.description, template.description_budget))
            }
        }
        let consumed = start + 2 + end + 2;
        offset += consumed;
        rest = &rest[consumed..];
    }
    text.push_str(rest);

    if !text.ends_with(TARGET_SUFFIX) {
        return Err(PromptError::MissingSuffix);
    }
    let instruction = text[..instruction_end.unwrap_or(0)].to_string();
    Ok(PromptDocument {
        instruction,
        demonstrations: demos.to_vec(),
        rules: template.rules.clone(),
        target: target.clone(),
        strategy: None,
        demo_ids: demos.iter().map(|d| d.record.id.clone()).collect(),
        text,
        system_split: template.system_split,
    })
}

/// One user message with the full text, or a system message holding the
/// instruction followed by a user message with the remainder.
pub fn to_messages(doc: &PromptDocument) -> Vec<ChatMessage> {
    if doc.system_split && !doc.instruction.is_empty() {
        let split = doc.instruction.len();
        vec![
            ChatMessage::new(Role::System, &doc.text[..split]),
            ChatMessage::new(Role::User, &doc.text[split..]),
        ]
    } else {
        vec![ChatMessage::new(Role::User, &doc.text)]
    }
}
