//! Command-line front end. `main` only forwards to [`dispatch`].
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Data goes to
//! stdout, logs to stderr.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{AppConfig, Backend};
use crate::corpus::{self, CorpusStore};
use crate::eval::{self, AnswerCache, GridSpec, KnownDataset, QADataset, ReportFormat, SweepOptions};
use crate::filter::{self, CitationCache, SemanticScholar};
use crate::index::Index;
use crate::pipeline::{Embedder, Pipeline};
use crate::reader::{Label, OverlapScorer, VoteScheme};
use crate::service::ServiceClient;

const LONG_VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (index format EQIDX1 v1)");

#[derive(Debug, Parser)]
#[command(name = "healthqa", version = LONG_VERSION, arg_required_else_help = true)]
#[command(about = "Open-domain health question answering over biomedical abstracts")]
struct Cli {
    /// Worker threads for answering questions (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
struct ConfigArgs {
    /// Config file (flat TOML keys).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. --set retrieval.top_k=10. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<AppConfig> {
        Ok(AppConfig::load(self.config.as_deref(), &self.overrides)?)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse MEDLINE XML or JSONL files into a document store.
    Ingest {
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Store directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build or query the BM25 index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Citation counts from Semantic Scholar.
    #[command(subcommand)]
    Citations(CitationsCommand),
    /// Answer a single question and print the record as JSON.
    Answer {
        #[arg(long)]
        question: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate on a labelled dataset.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Print the effective configuration.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Debug, Subcommand)]
enum IndexCommand {
    Build {
        /// Store directory produced by `ingest`.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    Search {
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Index file (default: index.path from config).
        #[arg(long)]
        index: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Debug, Subcommand)]
enum CitationsCommand {
    Fetch {
        /// File with one PMID per line.
        #[arg(long)]
        pmids: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        /// Requests per second.
        #[arg(long, default_value_t = 1.0)]
        rate: f64,
        #[arg(long, default_value = filter::SEMANTIC_SCHOLAR_URL)]
        api_url: String,
        /// Sent as x-api-key; falls back to SEMANTIC_SCHOLAR_API_KEY.
        #[arg(long)]
        api_key: Option<String>,
    },
}

#[derive(Debug, Args)]
struct DatasetArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Force the voting scheme instead of inferring it from the labels.
    #[arg(long)]
    scheme: Option<VoteScheme>,
    /// Check label counts against a published dataset
    /// (healthfc-3, healthfc-2, bioasq, trec).
    #[arg(long)]
    expect: Option<KnownDataset>,
}

impl DatasetArgs {
    fn load(&self) -> anyhow::Result<QADataset> {
        let dataset = match self.expect {
            Some(known) => {
                if self.scheme.is_some_and(|s| s != known.scheme()) {
                    bail!("--scheme conflicts with --expect {known:?}");
                }
                eval::load_known(&self.dataset, known)?
            }
            None => eval::load_dataset(&self.dataset, self.scheme)?,
        };
        let c = dataset.counts();
        log::info!(
            "dataset {}: {} questions ({} supported, {} refuted, {} nei), {:?} voting",
            dataset.name,
            dataset.len(),
            c.supported,
            c.refuted,
            c.nei,
            dataset.scheme
        );
        Ok(dataset)
    }
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// One configuration over the whole dataset.
    Run {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for report.csv, report.md and answers.jsonl.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// One evaluation per grid cell.
    Sweep {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[arg(long)]
        grid: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let jobs = cli.jobs.unwrap_or(0);
    match cli.command {
        Command::Ingest { inputs, out } => {
            let stats = corpus::ingest(&inputs, &out)?;
            print_json(&stats)
        }
        Command::Index(IndexCommand::Build { corpus, out, config }) => {
            let config = config.load()?;
            let store = CorpusStore::open(&corpus)?;
            let index = Index::build(&store, config.index)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            index.write_to(&out)?;
            log::info!(
                "indexed {} documents, {} terms, avg length {:.1}",
                index.doc_count(),
                index.stats().df.len(),
                index.avg_doc_len()
            );
            Ok(())
        }
        Command::Index(IndexCommand::Search { query, k, index, config }) => {
            let config = config.load()?;
            if k == 0 {
                bail!("--k must be at least 1");
            }
            let path = index.unwrap_or(config.index_path);
            let index = Index::open(&path)?;
            print_json(&index.search(&query, k, None))
        }
        Command::Citations(CitationsCommand::Fetch {
            pmids,
            cache,
            rate,
            api_url,
            api_key,
        }) => {
            let text = std::fs::read_to_string(&pmids).with_context(|| format!("reading {}", pmids.display()))?;
            let list: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            let mut cache = CitationCache::open(&cache)?;
            let api_key = api_key.or_else(|| std::env::var("SEMANTIC_SCHOLAR_API_KEY").ok());
            let source = SemanticScholar::new(api_url, api_key, std::time::Duration::from_secs(30));
            let options = filter::FetchOptions {
                rate,
                ..Default::default()
            };
            let records = filter::fetch_citations(&list, &mut cache, &source, options)?;
            let mut out = std::io::stdout().lock();
            for r in &records {
                serde_json::to_writer(&mut out, r)?;
                writeln!(out)?;
            }
            let known = records.iter().filter(|r| r.citation_count.is_some()).count();
            log::info!("{} PMIDs, {known} with known citation counts", records.len());
            Ok(())
        }
        Command::Answer { question, config } => {
            let config = config.load()?;
            let pipeline = build_pipeline(&config)?;
            let record = pipeline.answer("cli", &question, &config.retrieval)?;
            print_json(&record)
        }
        Command::Config { config } => {
            let config = config.load()?;
            print!("{}", config.to_canonical_toml());
            Ok(())
        }
        Command::Eval(EvalCommand::Run { dataset, config, out }) => {
            let config = config.load()?;
            let dataset = dataset.load()?;
            let pipeline = build_pipeline(&config)?;
            let mut retrieval = config.retrieval;
            retrieval.vote_scheme = dataset.scheme;
            retrieval.validate()?;
            let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
            let records = pool.install(|| eval::answer_all(&pipeline, &dataset, &retrieval, &AnswerCache::default()))?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_answers(&out.join("answers.jsonl"), &records)?;
            let predictions: BTreeMap<String, Label> =
                records.iter().map(|r| (r.question_id.clone(), r.verdict)).collect();
            let metrics = eval::evaluate(&predictions, &dataset)?;
            let report = eval::single_cell_report(&dataset, &retrieval, metrics.clone());
            eval::emit_report(&report, ReportFormat::Csv, &out.join("report.csv"))?;
            eval::emit_report(&report, ReportFormat::Markdown, &out.join("report.md"))?;
            print_json(&metrics)
        }
        Command::Eval(EvalCommand::Sweep {
            dataset,
            grid,
            config,
            out,
        }) => {
            let config = config.load()?;
            let dataset = dataset.load()?;
            let cells = GridSpec::load(&grid)?.cells(&config.retrieval)?;
            let pipeline = build_pipeline(&config)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let options = SweepOptions {
                jobs,
                answers_path: Some(out.join("answers.jsonl")),
            };
            let report = eval::run_sweep(&dataset, &cells, &pipeline, &options)?;
            eval::emit_report(&report, ReportFormat::Csv, &out.join("report.csv"))?;
            eval::emit_report(&report, ReportFormat::Markdown, &out.join("report.md"))?;
            print!("{}", eval::render_report(&report, ReportFormat::Markdown));
            let failed = report
                .rows
                .iter()
                .filter(|r| matches!(r.outcome, eval::CellOutcome::Failed { .. }))
                .count();
            if failed > 0 {
                log::warn!("{failed} of {} cells failed", report.rows.len());
            }
            Ok(())
        }
    }
}

fn write_answers(path: &Path, records: &[crate::reader::AnswerRecord]) -> anyhow::Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Opens the store, index and citation cache named in `config` and wires the
/// configured reader backend.
pub fn build_pipeline(config: &AppConfig) -> crate::Result<Pipeline> {
    let store = CorpusStore::open(&config.corpus_path)?;
    let index = Index::open(&config.index_path)?;
    if index.options() != &config.index {
        log::warn!(
            "index {} was built with {:?}; using those settings instead of the configured {:?}",
            config.index_path.display(),
            index.options(),
            config.index
        );
    }
    let citations = if config.citations_cache.exists() {
        CitationCache::open(&config.citations_cache)?.citations()
    } else {
        if config.retrieval.filter.min_citations.is_some() {
            log::warn!(
                "citation cache {} not found: every document fails the citation filter",
                config.citations_cache.display()
            );
        }
        filter::Citations::new()
    };
    let pipeline = match config.reader_backend {
        Backend::Fallback => Pipeline::new(index, store, Box::new(OverlapScorer::default()), Embedder::TfIdf),
        Backend::Service => {
            let client = |_: ()| {
                ServiceClient::new(&config.service_url, config.service_timeout(), config.service_batch_size)
            };
            let probe = client(());
            let health = probe.health()?;
            log::info!("inference service ready: {:?}", health.models);
            Pipeline::new(
                index,
                store,
                Box::new(probe),
                Embedder::Provider(Box::new(client(()))),
            )
        }
    };
    Ok(pipeline
        .with_citations(citations)
        .with_reader_options(config.reader)
        .with_embed_batch(config.service_batch_size))
}
