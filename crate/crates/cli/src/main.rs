use std::path::PathBuf;
use std::process::ExitCode;

use annotator_cli::commands::{self, AnnotateOptions};
use annotator_cli::config::{BackendKind, EmbeddingConfig, EmbeddingProviderKind, RunConfig};
use annotator_core::evaluation::{MatchMode, ReportFormat};
use annotator_core::prompting::{RandomMode, SelectionStrategy};
use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit status for `annotate --strict` when some requests failed.
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "annotator", version, about = "Few-shot subject annotation of dataset metadata")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect a division list.
    Taxonomy {
        #[command(subcommand)]
        action: TaxonomyAction,
    },
    /// Split the corpus into a demonstration pool and a test set.
    Sample(RunArgs),
    /// Classify every test record.
    Annotate {
        #[command(flatten)]
        run: RunArgs,
        /// Stop after the first N test records.
        #[arg(long)]
        limit: Option<usize>,
        /// Exit with status 3 if any request failed.
        #[arg(long)]
        strict: bool,
    },
    /// Score a run and write report.md, report.json and confusion.csv.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Run directory to score; defaults to the configured run.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Per-class and aggregate deltas, B minus A. Each side is a report.json
    /// path or `published:random` / `published:relevant`.
    Compare {
        a: String,
        b: String,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render a report.json.
    Report {
        path: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
    },
}

#[derive(Subcommand)]
enum TaxonomyAction {
    /// Load and check a taxonomy file (default: the shipped one).
    Validate { path: Option<PathBuf> },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Random,
    Relevant,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Http,
    Replay,
    Mock,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Stratum,
    AnyGold,
}

#[derive(Clone, Copy, ValueEnum)]
enum RandomDraw {
    PerTarget,
    PerRun,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbeddingKind {
    Hashing,
    Http,
}

/// Flags override values from `--config`.
#[derive(Args)]
struct RunArgs {
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long, value_enum)]
    strategy: Option<Strategy>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    random_mode: Option<RandomDraw>,
    #[arg(long)]
    cap_per_division: Option<usize>,
    #[arg(long)]
    test_per_division: Option<usize>,
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    #[arg(long)]
    mock_rules: Option<PathBuf>,
    #[arg(long)]
    replay: Option<PathBuf>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_tokens: Option<u32>,
    #[arg(long)]
    requests_per_minute: Option<u32>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    match_mode: Option<Mode>,
    #[arg(long)]
    min_support: Option<u64>,
    #[arg(long)]
    description_budget: Option<usize>,
    #[arg(long)]
    system_split: bool,
    /// Adds an embedding provider, needed by `--strategy relevant`.
    #[arg(long, value_enum)]
    embedding: Option<EmbeddingKind>,
}

impl RunArgs {
    fn into_config(self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident <- $value:expr),* $(,)?) => {
                $(if let Some(v) = $value { c.$field = v; })*
            };
        }
        set!(
            k <- self.k,
            seed <- self.seed,
            cap_per_division <- self.cap_per_division,
            test_per_division <- self.test_per_division,
            parallelism <- self.parallelism,
            cache_dir <- self.cache_dir,
            output_dir <- self.output_dir,
            min_support <- self.min_support,
            description_budget <- self.description_budget,
        );
        for (slot, value) in [
            (&mut c.taxonomy_path, self.taxonomy),
            (&mut c.corpus_path, self.corpus),
            (&mut c.template_path, self.template),
            (&mut c.rules_path, self.rules),
            (&mut c.mock_rules_path, self.mock_rules),
            (&mut c.replay_path, self.replay),
        ] {
            if value.is_some() {
                *slot = value;
            }
        }
        if let Some(s) = self.strategy {
            c.strategy = match s {
                Strategy::Random => SelectionStrategy::Random,
                Strategy::Relevant => SelectionStrategy::Relevant,
            };
        }
        if let Some(m) = self.random_mode {
            c.random_mode = match m {
                RandomDraw::PerTarget => RandomMode::PerTarget,
                RandomDraw::PerRun => RandomMode::PerRun,
            };
        }
        if let Some(b) = self.backend {
            c.backend = match b {
                Backend::Http => BackendKind::Http,
                Backend::Replay => BackendKind::Replay,
                Backend::Mock => BackendKind::Mock,
            };
        }
        if let Some(m) = self.match_mode {
            c.match_mode = match m {
                Mode::Stratum => MatchMode::Stratum,
                Mode::AnyGold => MatchMode::AnyGold,
            };
        }
        if let Some(kind) = self.embedding {
            let embedding = c.embedding.get_or_insert_with(EmbeddingConfig::default);
            embedding.provider = match kind {
                EmbeddingKind::Hashing => EmbeddingProviderKind::Hashing,
                EmbeddingKind::Http => EmbeddingProviderKind::Http,
            };
        }
        if self.base_url.is_some() {
            c.base_url = self.base_url;
        }
        if let Some(model) = self.model {
            c.params.model_id = model;
        }
        if let Some(t) = self.temperature {
            c.params.temperature = t;
        }
        if let Some(m) = self.max_tokens {
            c.params.max_tokens = m;
        }
        if self.requests_per_minute.is_some() {
            c.requests_per_minute = self.requests_per_minute;
        }
        c.system_split |= self.system_split;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Taxonomy {
            action: TaxonomyAction::Validate { path },
        } => {
            let s = commands::taxonomy_validate(path.as_deref())?;
            println!(
                "ok: scheme {:?} version {:?}, {} divisions, {} descendant codes",
                s.scheme_id, s.version, s.divisions, s.descendants
            );
        }
        Command::Sample(args) => {
            let out = commands::sample(&args.into_config()?)?;
            print!("{}", commands::render_split_counts(&out.counts));
            println!("wrote {} test and {} demonstration records to {}", out.test_set, out.demo_pool, out.dir.display());
        }
        Command::Annotate { run, limit, strict } => {
            let out = commands::annotate(&run.into_config()?, &AnnotateOptions { limit })?;
            let c = &out.manifest.counts;
            println!(
                "run {}: {} total, {} succeeded, {} failed, {} from cache -> {}",
                out.manifest.run_id,
                c.total,
                c.succeeded,
                c.failed,
                c.cache_hits,
                out.run_dir.display()
            );
            if strict && out.failed() > 0 {
                return Ok(EXIT_PARTIAL);
            }
        }
        Command::Evaluate { run, run_dir } => {
            let out = commands::evaluate(&run.into_config()?, run_dir.as_deref())?;
            let r = &out.report;
            println!(
                "macro {:.4}, micro {:.4}, std dev {:.4} over {} classes; reports in {}",
                r.macro_precision,
                r.micro_precision,
                r.std_dev,
                r.included_classes.len(),
                out.dir.display()
            );
        }
        Command::Compare { a, b, json, out } => {
            let (comparison, text) = commands::compare(&a, &b)?;
            let rendered = if json {
                serde_json::to_string_pretty(&comparison)? + "\n"
            } else {
                text
            };
            match out {
                Some(path) => std::fs::write(path, rendered)?,
                None => print!("{rendered}"),
            }
        }
        Command::Report { path, format } => {
            let format = match format {
                Format::Markdown => ReportFormat::Markdown,
                Format::Csv => ReportFormat::Csv,
                Format::Json => ReportFormat::Json,
            };
            print!("{}", commands::report(&path, format)?);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
