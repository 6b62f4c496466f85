//! Run configuration: a TOML file, overridden by command-line flags.
//!
//! Relative paths in a config file resolve against the file's directory.
//! Secrets never live here; the API key is read from `ANNOTATOR_API_KEY`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use annotator_core::evaluation::{MatchMode, DEFAULT_MIN_SUPPORT};
use annotator_core::gateway::GenerationParams;
use annotator_core::prompting::{RandomMode, SelectionStrategy, DEFAULT_K};
use annotator_core::seed::sha256_hex;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const API_KEY_VAR: &str = "ANNOTATOR_API_KEY";
pub const BASE_URL_VAR: &str = "ANNOTATOR_BASE_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Replay,
    #[default]
    Mock,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Http => "http",
            BackendKind::Replay => "replay",
            BackendKind::Mock => "mock",
        })
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http" => Ok(BackendKind::Http),
            "replay" => Ok(BackendKind::Replay),
            "mock" => Ok(BackendKind::Mock),
            other => Err(format!("unknown backend {other:?} (expected http, replay or mock)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingProviderKind {
    /// Offline character n-gram hashing.
    #[default]
    Hashing,
    /// OpenAI-compatible `/embeddings` endpoint.
    Http,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub provider: EmbeddingProviderKind,
    pub model_id: String,
    pub dim: usize,
    pub include_description: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            provider: EmbeddingProviderKind::Hashing,
            model_id: "text-embedding-ada-002".to_string(),
            dim: 256,
            include_description: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Defaults to the shipped division list.
    pub taxonomy_path: Option<PathBuf>,
    pub corpus_path: Option<PathBuf>,
    /// Defaults to the shipped template and rules.
    pub template_path: Option<PathBuf>,
    pub rules_path: Option<PathBuf>,
    pub strategy: SelectionStrategy,
    pub k: usize,
    pub seed: u64,
    pub random_mode: RandomMode,
    pub cap_per_division: usize,
    pub test_per_division: usize,
    pub params: GenerationParams,
    pub backend: BackendKind,
    /// Keyword rules for the mock backend; defaults to the shipped set.
    pub mock_rules_path: Option<PathBuf>,
    pub replay_path: Option<PathBuf>,
    /// Overrides `ANNOTATOR_BASE_URL` and the public default.
    pub base_url: Option<String>,
    pub requests_per_minute: Option<u32>,
    pub timeout_secs: u64,
    pub parallelism: usize,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
    pub match_mode: MatchMode,
    pub min_support: u64,
    pub description_budget: usize,
    pub system_split: bool,
    pub embedding: Option<EmbeddingConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            taxonomy_path: None,
            corpus_path: None,
            template_path: None,
            rules_path: None,
            strategy: SelectionStrategy::Random,
            k: DEFAULT_K,
            seed: 0,
            random_mode: RandomMode::PerTarget,
            cap_per_division: 100,
            test_per_division: 100,
            params: GenerationParams::default(),
            backend: BackendKind::Mock,
            mock_rules_path: None,
            replay_path: None,
            base_url: None,
            requests_per_minute: None,
            timeout_secs: 60,
            parallelism: 4,
            cache_dir: PathBuf::from("cache"),
            output_dir: PathBuf::from("out"),
            match_mode: MatchMode::Stratum,
            min_support: DEFAULT_MIN_SUPPORT,
            description_budget: annotator_core::corpus::DEFAULT_DESCRIPTION_BUDGET,
            system_split: false,
            embedding: None,
        }
    }
}

/// Content hash of an input file, so that editing it changes the run id.
fn file_digest(path: &Option<PathBuf>) -> Option<String> {
    path.as_ref().map(|p| match std::fs::read(p) {
        Ok(bytes) => sha256_hex(&bytes),
        Err(_) => format!("unreadable:{}", p.display()),
    })
}

fn resolve(base: &Path, path: &mut PathBuf) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).context("invalid config")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config = Self::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for path in [
            &mut self.taxonomy_path,
            &mut self.corpus_path,
            &mut self.template_path,
            &mut self.rules_path,
            &mut self.mock_rules_path,
            &mut self.replay_path,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, path);
        }
        resolve(base, &mut self.cache_dir);
        resolve(base, &mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            bail!("k must be at least 1");
        }
        if self.parallelism == 0 {
            bail!("parallelism must be at least 1");
        }
        if self.cap_per_division == 0 || self.test_per_division == 0 {
            bail!("cap_per_division and test_per_division must be at least 1");
        }
        if self.description_budget == 0 {
            bail!("description_budget must be at least 1");
        }
        if self.requests_per_minute == Some(0) {
            bail!("requests_per_minute must be positive");
        }
        if self.strategy == SelectionStrategy::Relevant && self.embedding.is_none() {
            bail!("configuration error: strategy \"relevant\" needs an [embedding] section");
        }
        if self.backend == BackendKind::Replay && self.replay_path.is_none() {
            bail!("configuration error: the replay backend needs replay_path");
        }
        self.params.validate()?;
        Ok(())
    }

    /// Settings that determine prediction bytes. Input files enter by
    /// content; output paths, parallelism and rate limits are left out.
    fn identity(&self) -> serde_json::Value {
        serde_json::json!({
            "strategy": self.strategy,
            "k": self.k,
            "seed": self.seed,
            "random_mode": self.random_mode,
            "params": self.params,
            "backend": self.backend,
            "match_mode": self.match_mode,
            "description_budget": self.description_budget,
            "system_split": self.system_split,
            "embedding": self.embedding,
            "cap_per_division": self.cap_per_division,
            "test_per_division": self.test_per_division,
            "inputs": [
                file_digest(&self.taxonomy_path),
                file_digest(&self.corpus_path),
                file_digest(&self.template_path),
                file_digest(&self.rules_path),
                file_digest(&self.mock_rules_path),
                file_digest(&self.replay_path),
            ],
        })
    }

    /// `<strategy>-<12 hex digits>`, stable for identical settings.
    pub fn run_id(&self) -> String {
        let digest = sha256_hex(self.identity().to_string().as_bytes());
        format!("{}-{}", self.strategy, &digest[..12])
    }

    pub fn split_dir(&self) -> PathBuf {
        self.output_dir.join("split")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join("runs").join(self.run_id())
    }
}
