//! Subcommand implementations. Each returns a structured outcome so the
//! binary can print a summary and tests can inspect counters.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use annotator_core::corpus::{
    build_split, parse_records, split_counts, write_records, MetadataRecord, ParseMode, RecordFormat, SplitCounts,
};
use annotator_core::embedding::{
    build_demo_index, DemoIndex, Embedder, EmbeddingCache, EmbeddingProvider, FieldPolicy, HashingProvider,
    OpenAiEmbeddingProvider,
};
use annotator_core::evaluation::{
    compare as compare_summaries, evaluate_run, render_comparison, render_report, ClassScore, Comparison,
    EvaluationReport, ReportFormat, ScoreSummary, DEFAULT_MIN_SUPPORT,
};
use annotator_core::fixtures;
use annotator_core::gateway::{
    batch_complete, prompt_hash, BatchCounts, BatchError, ChatBackend, Gateway, HttpBackend, JobStatus,
    ReplayBackend, ResponseCache, RetryPolicy, RuleMockBackend,
};
use annotator_core::parser::{parse_response, PredictionRecord};
use annotator_core::prompting::{
    render_prompt, select_demonstrations, to_messages, PromptTemplate, Relevance, SelectionConfig, SelectionStrategy,
};
use annotator_core::taxonomy::{load_taxonomy, Taxonomy};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::{BackendKind, EmbeddingConfig, EmbeddingProviderKind, RunConfig, API_KEY_VAR, BASE_URL_VAR};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const DEMO_POOL_FILE: &str = "demo_pool.jsonl";
pub const TEST_SET_FILE: &str = "test_set.jsonl";
pub const SPLIT_COUNTS_FILE: &str = "split_counts.tsv";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const SELECTIONS_FILE: &str = "selections.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn load_config_taxonomy(config: &RunConfig) -> Result<Taxonomy> {
    match &config.taxonomy_path {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            load_taxonomy(&text).with_context(|| format!("in {}", path.display()))
        }
        None => Ok(fixtures::default_taxonomy()),
    }
}

fn load_template(config: &RunConfig) -> Result<PromptTemplate> {
    let read = |path: &Path| fs::read_to_string(path).with_context(|| format!("reading {}", path.display()));
    let template = match (&config.template_path, &config.rules_path) {
        (None, None) => PromptTemplate::default(),
        (body, rules) => {
            let body = match body {
                Some(p) => read(p)?,
                None => PromptTemplate::default().body,
            };
            let rules = match rules {
                Some(p) => read(p)?,
                None => PromptTemplate::default_rules().to_string(),
            };
            PromptTemplate::new(&body, &rules)
        }
    };
    Ok(template
        .with_system_split(config.system_split)
        .with_description_budget(config.description_budget))
}

pub fn read_records(path: &Path) -> Result<Vec<MetadataRecord>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let parsed = parse_records(BufReader::new(file), RecordFormat::from_path(path), ParseMode::Strict)
        .with_context(|| format!("in {}", path.display()))?;
    Ok(parsed.records)
}

fn write_jsonl_records(path: &Path, records: &[MetadataRecord]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_records(records, RecordFormat::Jsonl, &mut out)?;
    out.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaxonomySummary {
    pub scheme_id: String,
    pub version: String,
    pub divisions: usize,
    pub descendants: usize,
}

pub fn taxonomy_validate(path: Option<&Path>) -> Result<TaxonomySummary> {
    let config = RunConfig {
        taxonomy_path: path.map(Path::to_path_buf),
        ..RunConfig::default()
    };
    let taxonomy = load_config_taxonomy(&config)?;
    Ok(TaxonomySummary {
        scheme_id: taxonomy.scheme_id.clone(),
        version: taxonomy.version.clone(),
        divisions: taxonomy.len(),
        descendants: taxonomy.descendants().len(),
    })
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub dir: PathBuf,
    pub demo_pool: usize,
    pub test_set: usize,
    pub counts: Vec<SplitCounts>,
}

pub fn render_split_counts(counts: &[SplitCounts]) -> String {
    let mut out = String::from("code\tlabel\tavailable\ttest\tdemo\n");
    for c in counts {
        out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", c.code, c.label, c.available, c.test, c.demo));
    }
    let sum = |f: fn(&SplitCounts) -> usize| counts.iter().map(f).sum::<usize>();
    out.push_str(&format!(
        "total\t\t{}\t{}\t{}\n",
        sum(|c| c.available),
        sum(|c| c.test),
        sum(|c| c.demo)
    ));
    out
}

pub fn sample(config: &RunConfig) -> Result<SampleOutcome> {
    config.validate()?;
    let taxonomy = load_config_taxonomy(config)?;
    let corpus_path = config.corpus_path.as_ref().context("corpus_path is not set")?;
    let records = read_records(corpus_path)?;
    if records.is_empty() {
        bail!("no records in {}", corpus_path.display());
    }
    let split = build_split(&records, &taxonomy, config.cap_per_division, config.test_per_division, config.seed);
    if split.test_set.is_empty() {
        bail!("no records in {} carry a known division", corpus_path.display());
    }
    let dir = config.split_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_jsonl_records(&dir.join(DEMO_POOL_FILE), &split.demo_records())?;
    write_jsonl_records(&dir.join(TEST_SET_FILE), &split.test_records())?;
    let counts = split_counts(&records, &split, &taxonomy);
    fs::write(dir.join(SPLIT_COUNTS_FILE), render_split_counts(&counts))?;
    Ok(SampleOutcome {
        dir,
        demo_pool: split.demo_pool.len(),
        test_set: split.test_set.len(),
        counts,
    })
}

fn api_key() -> Option<String> {
    std::env::var(API_KEY_VAR).ok().filter(|k| !k.trim().is_empty())
}

fn base_url(config: &RunConfig) -> String {
    config
        .base_url
        .clone()
        .or_else(|| std::env::var(BASE_URL_VAR).ok().filter(|u| !u.trim().is_empty()))
        .unwrap_or_else(|| HttpBackend::DEFAULT_BASE_URL.to_string())
}

fn needs_key(config: &RunConfig) -> Result<Option<String>> {
    let key = api_key();
    if key.is_none() && base_url(config) == HttpBackend::DEFAULT_BASE_URL {
        bail!("configuration error: {API_KEY_VAR} is not set");
    }
    Ok(key)
}

pub fn build_backend(config: &RunConfig) -> Result<Arc<dyn ChatBackend>> {
    Ok(match config.backend {
        BackendKind::Mock => {
            let rules = match &config.mock_rules_path {
                Some(path) => RuleMockBackend::parse_rules(
                    &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
                )?,
                None => fixtures::mock_rules(),
            };
            Arc::new(RuleMockBackend::new(rules)?)
        }
        BackendKind::Replay => {
            let path = config.replay_path.as_ref().context("replay_path is not set")?;
            let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            Arc::new(ReplayBackend::from_jsonl(BufReader::new(file))?)
        }
        BackendKind::Http => {
            let key = needs_key(config)?;
            Arc::new(HttpBackend::new(
                base_url(config),
                key,
                std::time::Duration::from_secs(config.timeout_secs),
            )?)
        }
    })
}

fn build_embedder(config: &RunConfig, embedding: &EmbeddingConfig) -> Result<Embedder> {
    let provider: Arc<dyn EmbeddingProvider> = match embedding.provider {
        EmbeddingProviderKind::Hashing => {
            if embedding.dim == 0 {
                bail!("embedding dim must be positive");
            }
            Arc::new(HashingProvider::new(embedding.dim))
        }
        EmbeddingProviderKind::Http => {
            let key = needs_key(config)?;
            Arc::new(OpenAiEmbeddingProvider::new(base_url(config), embedding.model_id.clone(), key))
        }
    };
    let cache = EmbeddingCache::open(&config.cache_dir.join("embeddings"))?;
    Ok(Embedder::new(provider, Arc::new(cache)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timings {
    pub started_at: u64,
    pub prepare_ms: u64,
    pub complete_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub config: RunConfig,
    pub counts: BatchCounts,
    pub backend_id: String,
    pub backend_calls: usize,
    pub embedding_calls: usize,
    pub short_selections: usize,
    pub timings: Timings,
    pub jobs: Vec<JobStatus>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
struct SelectionLine<'a> {
    record_id: &'a str,
    demo_ids: Vec<String>,
    short: bool,
    prompt_hash: String,
}

#[derive(Debug, Clone, Default)]
pub struct AnnotateOptions {
    /// Only the first `limit` test records, e.g. to warm the cache.
    pub limit: Option<usize>,
}

#[derive(Debug)]
pub struct AnnotateOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
}

impl AnnotateOutcome {
    pub fn failed(&self) -> usize {
        self.manifest.counts.failed
    }
}

pub fn annotate(config: &RunConfig, options: &AnnotateOptions) -> Result<AnnotateOutcome> {
    config.validate()?;
    let started = Instant::now();
    let started_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let taxonomy = load_config_taxonomy(config)?;
    let template = load_template(config)?;
    let split_dir = config.split_dir();
    let missing_split = || format!("reading the split in {}; run `annotator sample` first", split_dir.display());
    let pool = read_records(&split_dir.join(DEMO_POOL_FILE)).with_context(missing_split)?;
    let mut tests = read_records(&split_dir.join(TEST_SET_FILE)).with_context(missing_split)?;
    if let Some(limit) = options.limit {
        tests.truncate(limit);
    }
    let backend = build_backend(config)?;

    let selection = SelectionConfig {
        strategy: config.strategy,
        k: config.k,
        seed: config.seed,
        random_mode: config.random_mode,
    };
    let relevant = match (config.strategy, &config.embedding) {
        (SelectionStrategy::Relevant, Some(embedding)) => {
            let embedder = build_embedder(config, embedding)?;
            let policy = FieldPolicy {
                include_description: embedding.include_description,
                description_budget: config.description_budget,
            };
            let index = build_demo_index(&pool, &embedder, &policy)?;
            Some((embedder, policy, index))
        }
        _ => None,
    };

    let mut jobs = Vec::with_capacity(tests.len());
    let mut selection_lines = String::new();
    let mut short_selections = 0;
    for target in &tests {
        let query;
        let relevance = match &relevant {
            Some((embedder, policy, index)) => {
                query = embedder
                    .embed(&policy.text_for(target))
                    .with_context(|| format!("embedding {}", target.id))?;
                Some(Relevance {
                    index: index as &DemoIndex,
                    query: &query,
                })
            }
            None => None,
        };
        let chosen = select_demonstrations(&selection, target, &pool, &taxonomy, relevance)
            .with_context(|| format!("selecting demonstrations for {}", target.id))?;
        short_selections += usize::from(chosen.short);
        let doc = render_prompt(target, &chosen.demonstrations, &taxonomy, &template)
            .with_context(|| format!("rendering the prompt for {}", target.id))?;
        let messages = to_messages(&doc);
        let line = SelectionLine {
            record_id: &target.id,
            demo_ids: chosen.ids(),
            short: chosen.short,
            prompt_hash: prompt_hash(&messages),
        };
        selection_lines.push_str(&serde_json::to_string(&line)?);
        selection_lines.push('\n');
        jobs.push((target.id.clone(), messages));
    }
    let prepare_ms = started.elapsed().as_millis() as u64;

    let cache = ResponseCache::open(&config.cache_dir.join("responses"))?;
    let gateway = Gateway::new(backend, Arc::new(cache))
        .with_retry(RetryPolicy {
            seed: config.seed,
            ..RetryPolicy::default()
        })
        .with_rate_limit(config.requests_per_minute);
    let batch_started = Instant::now();
    let batch = batch_complete(&jobs, &config.params, &gateway, config.parallelism);
    let complete_ms = batch_started.elapsed().as_millis() as u64;

    let run_dir = config.run_dir();
    fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    fs::write(run_dir.join(SELECTIONS_FILE), selection_lines)?;

    let (outcome, all_failed) = match batch {
        Ok(outcome) => (outcome, false),
        Err(BatchError::AllFailed(outcome)) => (outcome, true),
        Err(e) => return Err(e.into()),
    };
    let mut predictions = String::new();
    for (id, result) in &outcome.results {
        if let Ok(completion) = result {
            let record = PredictionRecord::new(
                id.clone(),
                parse_response(&completion.content, &taxonomy),
                completion.finish_reason.clone(),
            );
            predictions.push_str(&serde_json::to_string(&record)?);
            predictions.push('\n');
        }
    }
    fs::write(run_dir.join(PREDICTIONS_FILE), predictions)?;

    let manifest = RunManifest {
        run_id: config.run_id(),
        tool_version: TOOL_VERSION.to_string(),
        config: config.clone(),
        counts: outcome.counts.clone(),
        backend_id: gateway.backend_id().to_string(),
        backend_calls: gateway.backend_calls(),
        embedding_calls: relevant.as_ref().map_or(0, |(e, _, _)| e.provider_calls()),
        short_selections,
        timings: Timings {
            started_at,
            prepare_ms,
            complete_ms,
        },
        jobs: outcome.statuses(),
    };
    write_json(&run_dir.join(MANIFEST_FILE), &manifest)?;
    if all_failed {
        let first = manifest.jobs.iter().find_map(|j| j.error.clone()).unwrap_or_default();
        bail!("all {} requests failed (first error: {first}); see {}", manifest.counts.total, run_dir.display());
    }
    Ok(AnnotateOutcome { run_dir, manifest })
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

#[derive(Debug)]
pub struct EvaluateOutcome {
    pub dir: PathBuf,
    pub report: EvaluationReport,
}

pub const REPORT_FILES: [(&str, ReportFormat); 3] = [
    ("report.md", ReportFormat::Markdown),
    ("report.json", ReportFormat::Json),
    ("confusion.csv", ReportFormat::Csv),
];

/// Scores `run_dir` (default: the configured run) against the test set.
pub fn evaluate(config: &RunConfig, run_dir: Option<&Path>) -> Result<EvaluateOutcome> {
    let taxonomy = load_config_taxonomy(config)?;
    let dir = run_dir.map_or_else(|| config.run_dir(), Path::to_path_buf);
    let predictions = read_predictions(&dir.join(PREDICTIONS_FILE))?;
    let tests = read_records(&config.split_dir().join(TEST_SET_FILE))?;
    let report = evaluate_run(&predictions, &tests, &taxonomy, config.match_mode, config.min_support)?;
    for (name, format) in REPORT_FILES {
        fs::write(dir.join(name), render_report(&report, format)?)?;
    }
    Ok(EvaluateOutcome { dir, report })
}

pub const PUBLISHED_PREFIX: &str = "published:";

/// Per-class values printed for one strategy, with the published per-class
/// test counts as support.
pub fn published_summary(strategy: SelectionStrategy) -> Result<ScoreSummary> {
    let taxonomy = fixtures::default_taxonomy();
    let counts = fixtures::table2_counts();
    let values = fixtures::table3_values();
    let column = values.column(strategy);
    let scores: Vec<ClassScore> = taxonomy
        .codes()
        .map(|code| ClassScore {
            code: code.to_string(),
            support: counts.get(code).copied().unwrap_or(0),
            precision: column.get(code).copied(),
            true_positives: None,
            predicted: None,
        })
        .collect();
    Ok(ScoreSummary::from_scores(
        format!("published {strategy}"),
        &taxonomy,
        &scores,
        DEFAULT_MIN_SUPPORT,
    )?)
}

/// A report.json path, or `published:random` / `published:relevant`.
pub fn load_summary(source: &str) -> Result<ScoreSummary> {
    if let Some(strategy) = source.strip_prefix(PUBLISHED_PREFIX) {
        let strategy: SelectionStrategy = strategy.parse().map_err(anyhow::Error::msg)?;
        return published_summary(strategy);
    }
    let path = Path::new(source);
    let report = read_report(path)?;
    let name = path
        .parent()
        .and_then(Path::file_name)
        .map_or_else(|| source.to_string(), |n| n.to_string_lossy().into_owned());
    Ok(ScoreSummary::from_report(name, &report))
}

pub fn read_report(path: &Path) -> Result<EvaluationReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn compare(a: &str, b: &str) -> Result<(Comparison, String)> {
    let comparison = compare_summaries(&load_summary(a)?, &load_summary(b)?)?;
    let text = render_comparison(&comparison);
    Ok((comparison, text))
}

pub fn report(path: &Path, format: ReportFormat) -> Result<String> {
    Ok(render_report(&read_report(path)?, format)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_in(dir: &Path) -> RunConfig {
        let corpus = dir.join("corpus.jsonl");
        fs::write(&corpus, fixtures::SYNTHETIC_CORPUS).unwrap();
        RunConfig {
            corpus_path: Some(corpus),
            cache_dir: dir.join("cache"),
            output_dir: dir.join("out"),
            test_per_division: 4,
            cap_per_division: 4,
            min_support: 2,
            seed: 11,
            ..RunConfig::default()
        }
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = config_in(dir.path());
        fs::write(config.corpus_path.as_ref().unwrap(), "").unwrap();
        let err = sample(&config).unwrap_err().to_string();
        assert!(err.contains("no records"), "{err}");
        config.corpus_path = None;
        assert!(sample(&config).is_err());
    }

    #[test]
    fn sample_writes_split_files() {
        let dir = tempfile::tempdir().unwrap();
        let config = config_in(dir.path());
        let out = sample(&config).unwrap();
        assert_eq!(out.test_set, 32);
        assert_eq!(out.demo_pool, 32);
        let summary = fs::read_to_string(out.dir.join(SPLIT_COUNTS_FILE)).unwrap();
        assert!(summary.ends_with("total\t\t64\t32\t32\n"), "{summary}");
        assert_eq!(read_records(&out.dir.join(TEST_SET_FILE)).unwrap().len(), 32);
    }

    #[test]
    fn annotate_without_split_explains() {
        let dir = tempfile::tempdir().unwrap();
        let err = format!("{:#}", annotate(&config_in(dir.path()), &AnnotateOptions::default()).unwrap_err());
        assert!(err.contains("annotator sample"), "{err}");
    }

    #[test]
    fn failed_jobs_are_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = config_in(dir.path());
        sample(&config).unwrap();
        let replay = dir.path().join("replay.jsonl");
        fs::write(&replay, "").unwrap();
        config.backend = BackendKind::Replay;
        config.replay_path = Some(replay);
        let err = annotate(&config, &AnnotateOptions::default()).unwrap_err().to_string();
        assert!(err.contains("all 32 requests failed"), "{err}");
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(config.run_dir().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(manifest["counts"]["failed"], 32);
    }

    #[test]
    fn published_summaries_line_up() {
        let random = published_summary(SelectionStrategy::Random).unwrap();
        let relevant = published_summary(SelectionStrategy::Relevant).unwrap();
        assert_eq!(random.included_classes.len(), 20);
        let (cmp, text) = compare("published:random", "published:relevant").unwrap();
        assert!((cmp.macro_delta - (relevant.macro_precision - random.macro_precision)).abs() < 1e-12);
        assert!(text.contains("Macro Average"));
        assert!(load_summary("published:bogus").is_err());
    }

    #[test]
    fn taxonomy_validation_reports_shape() {
        let summary = taxonomy_validate(None).unwrap();
        assert_eq!(summary.divisions, 22);
        assert_eq!(summary.scheme_id, "anzsrc-for");
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.tsv");
        fs::write(&bad, "01\tmaths\n01\tmore maths\n").unwrap();
        assert!(taxonomy_validate(Some(&bad)).is_err());
    }
}
