//! Datasets, macro-averaged metrics and parameter sweeps.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::Pipeline;
use crate::reader::{AnswerRecord, EvidenceMode, Label, RetrievalConfig, VoteScheme};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAInstance {
    pub id: String,
    pub question: String,
    #[serde(rename = "label")]
    pub gold: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QADataset {
    pub name: String,
    pub scheme: VoteScheme,
    pub instances: Vec<QAInstance>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LabelCounts {
    pub supported: usize,
    pub refuted: usize,
    pub nei: usize,
}

impl LabelCounts {
    pub fn total(&self) -> usize {
        self.supported + self.refuted + self.nei
    }
}

impl QADataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn counts(&self) -> LabelCounts {
        let mut c = LabelCounts::default();
        for inst in &self.instances {
            match inst.gold {
                Label::Supported => c.supported += 1,
                Label::Refuted => c.refuted += 1,
                Label::NotEnoughInfo => c.nei += 1,
            }
        }
        c
    }

    pub fn classes(&self) -> &'static [Label] {
        classes(self.scheme)
    }
}

pub fn classes(scheme: VoteScheme) -> &'static [Label] {
    match scheme {
        VoteScheme::Binary => &[Label::Refuted, Label::Supported],
        VoteScheme::Ternary => &[Label::Refuted, Label::Supported, Label::NotEnoughInfo],
    }
}

#[derive(Deserialize)]
struct DatasetLine {
    id: serde_json::Value,
    question: String,
    label: String,
}

/// Reads `{"id", "question", "label"}` JSONL.
///
/// With `scheme` unset the dataset is ternary iff any label is `nei`. A `nei`
/// label in a dataset declared binary is a validation error.
pub fn load_dataset(path: &Path, scheme: Option<VoteScheme>) -> Result<QADataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut instances = Vec::new();
    let mut seen = HashMap::new();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: DatasetLine = serde_json::from_str(&line).map_err(|e| parse_err(n + 1, e.to_string()))?;
        let id = match raw.id {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(x) => x.to_string(),
            other => return Err(parse_err(n + 1, format!("id must be a string or number, got {other}"))),
        };
        let gold: Label = raw
            .label
            .trim()
            .to_ascii_lowercase()
            .parse()
            .map_err(|e: String| parse_err(n + 1, e))?;
        if gold == Label::NotEnoughInfo && scheme == Some(VoteScheme::Binary) {
            return Err(Error::Validation(format!(
                "{}:{}: label nei in a binary dataset",
                path.display(),
                n + 1
            )));
        }
        if let Some(prev) = seen.insert(id.clone(), n + 1) {
            return Err(parse_err(n + 1, format!("duplicate id {id:?} (first on line {prev})")));
        }
        instances.push(QAInstance {
            id,
            question: raw.question,
            gold,
        });
    }
    let scheme = scheme.unwrap_or_else(|| {
        if instances.iter().any(|i| i.gold == Label::NotEnoughInfo) {
            VoteScheme::Ternary
        } else {
            VoteScheme::Binary
        }
    });
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(QADataset {
        name,
        scheme,
        instances,
    })
}

/// Published label distributions of the benchmark datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnownDataset {
    HealthFc3,
    HealthFc2,
    BioAsq,
    TrecHealth,
}

impl KnownDataset {
    pub fn scheme(self) -> VoteScheme {
        match self {
            KnownDataset::HealthFc3 => VoteScheme::Ternary,
            _ => VoteScheme::Binary,
        }
    }

    pub fn expected(self) -> LabelCounts {
        let (supported, refuted, nei) = match self {
            KnownDataset::HealthFc3 => (202, 125, 433),
            KnownDataset::HealthFc2 => (202, 125, 0),
            KnownDataset::BioAsq => (614, 131, 0),
            KnownDataset::TrecHealth => (61, 52, 0),
        };
        LabelCounts {
            supported,
            refuted,
            nei,
        }
    }
}

impl std::str::FromStr for KnownDataset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['_', ' '], "-").as_str() {
            "healthfc-3" | "healthfc3" => Ok(KnownDataset::HealthFc3),
            "healthfc-2" | "healthfc2" => Ok(KnownDataset::HealthFc2),
            "bioasq" | "bioasq-7b" => Ok(KnownDataset::BioAsq),
            "trec" | "trec-health" => Ok(KnownDataset::TrecHealth),
            other => Err(format!("unknown dataset {other:?} (healthfc-3|healthfc-2|bioasq|trec)")),
        }
    }
}

/// Loads a converted benchmark file and checks it against the published counts.
pub fn load_known(path: &Path, known: KnownDataset) -> Result<QADataset> {
    let dataset = load_dataset(path, Some(known.scheme()))?;
    let (got, want) = (dataset.counts(), known.expected());
    if got != want {
        return Err(Error::Validation(format!(
            "{}: label counts supported/refuted/nei = {}/{}/{}, expected {}/{}/{} for {known:?}",
            path.display(),
            got.supported,
            got.refuted,
            got.nei,
            want.supported,
            want.refuted,
            want.nei
        )));
    }
    Ok(dataset)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: Label,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_p: f64,
    pub macro_r: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub n_questions: usize,
}

fn ratio(num: usize, den: usize, what: &str, label: Label) -> f64 {
    if den == 0 {
        log::warn!("{what} undefined for class {label} (0/0), using 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Macro-averaged precision, recall and F1 over the classes of the dataset's
/// scheme. Every 0/0 is taken as 0.
pub fn evaluate(predictions: &BTreeMap<String, Label>, dataset: &QADataset) -> Result<MetricsReport> {
    let missing: Vec<String> = dataset
        .instances
        .iter()
        .filter(|i| !predictions.contains_key(&i.id))
        .map(|i| i.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    let pairs: Vec<(Label, Label)> = dataset
        .instances
        .iter()
        .map(|i| (i.gold, predictions[&i.id]))
        .collect();
    Ok(metrics_from_pairs(&pairs, dataset.scheme))
}

/// Metrics over `(gold, predicted)` pairs.
pub fn metrics_from_pairs(pairs: &[(Label, Label)], scheme: VoteScheme) -> MetricsReport {
    let classes = classes(scheme);
    let per_class: Vec<ClassMetrics> = classes
        .iter()
        .map(|&c| {
            let tp = pairs.iter().filter(|(g, p)| *g == c && *p == c).count();
            let predicted = pairs.iter().filter(|(_, p)| *p == c).count();
            let support = pairs.iter().filter(|(g, _)| *g == c).count();
            let precision = ratio(tp, predicted, "precision", c);
            let recall = ratio(tp, support, "recall", c);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                label: c,
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let n = classes.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n;
    let correct = pairs.iter().filter(|(g, p)| g == p).count();
    MetricsReport {
        macro_p: mean(|c| c.precision),
        macro_r: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        accuracy: if pairs.is_empty() { 0.0 } else { correct as f64 / pairs.len() as f64 },
        n_questions: pairs.len(),
        per_class,
    }
}

/// Parameter varied along a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    TopK,
    TopJ,
    MinYear,
    MinCitations,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::TopK => "top_k",
            SweepParam::TopJ => "top_j",
            SweepParam::MinYear => "min_year",
            SweepParam::MinCitations => "min_citations",
        }
    }

    fn heading(self) -> &'static str {
        match self {
            SweepParam::TopK => "Top k docs",
            SweepParam::TopJ => "Top j sents",
            SweepParam::MinYear => "Year",
            SweepParam::MinCitations => "# Cits.",
        }
    }

    fn apply(self, base: &RetrievalConfig, value: i64) -> Result<RetrievalConfig> {
        let mut config = *base;
        let positive = |v: i64| -> Result<usize> {
            usize::try_from(v)
                .ok()
                .filter(|v| *v >= 1)
                .ok_or_else(|| Error::Config(format!("{} must be at least 1, got {v}", self.as_str())))
        };
        match self {
            SweepParam::TopK => {
                config.mode = EvidenceMode::Document;
                config.top_k = positive(value)?;
            }
            SweepParam::TopJ => {
                config.mode = EvidenceMode::Sentence;
                config.top_j = positive(value)?;
            }
            SweepParam::MinYear => {
                config.filter.min_year = Some(
                    i32::try_from(value).map_err(|_| Error::Config(format!("min_year {value} out of range")))?,
                )
            }
            SweepParam::MinCitations => {
                config.filter.min_citations = Some(
                    u64::try_from(value)
                        .map_err(|_| Error::Config(format!("min_citations must be >= 0, got {value}")))?,
                )
            }
        }
        Ok(config)
    }
}

/// A sweep definition: one parameter varied over `values` on top of `base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub base: Option<RetrievalConfig>,
    pub param: SweepParam,
    pub values: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub param: SweepParam,
    pub value: i64,
    pub config: RetrievalConfig,
}

impl GridSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Cells in declaration order. `fallback_base` is used when the grid does
    /// not carry its own base config.
    pub fn cells(&self, fallback_base: &RetrievalConfig) -> Result<Vec<GridCell>> {
        let base = self.base.unwrap_or(*fallback_base);
        self.values
            .iter()
            .map(|&value| {
                Ok(GridCell {
                    param: self.param,
                    value,
                    config: self.param.apply(&base, value)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellOutcome {
    Ok { metrics: MetricsReport },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: EvidenceMode,
    pub param: SweepParam,
    pub value: i64,
    pub config: RetrievalConfig,
    pub fingerprint: String,
    pub n_questions: usize,
    pub outcome: CellOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub dataset: String,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    /// Worker threads for questions within a cell; 0 means all cores.
    pub jobs: usize,
    /// Where every AnswerRecord is appended, in cell then question-id order.
    pub answers_path: Option<PathBuf>,
}

/// Answers every question of `dataset` under `config`, in question-id order.
pub fn answer_all(
    pipeline: &Pipeline,
    dataset: &QADataset,
    config: &RetrievalConfig,
    cache: &AnswerCache,
) -> Result<Vec<AnswerRecord>> {
    let mut ordered: Vec<&QAInstance> = dataset.instances.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    ordered
        .par_iter()
        .map(|q| cache.get_or_answer(pipeline, q, config))
        .collect()
}

/// Answers keyed by (question id, config fingerprint).
#[derive(Debug, Default)]
pub struct AnswerCache {
    answers: Mutex<HashMap<(String, String), AnswerRecord>>,
}

impl AnswerCache {
    pub fn get_or_answer(&self, pipeline: &Pipeline, q: &QAInstance, config: &RetrievalConfig) -> Result<AnswerRecord> {
        let key = (q.id.clone(), config.fingerprint());
        if let Some(hit) = self.answers.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let record = pipeline.answer(&q.id, &q.question, config)?;
        self.answers.lock().unwrap().insert(key, record.clone());
        Ok(record)
    }
}

/// Runs one evaluation per cell. The dataset's scheme overrides the cells'
/// vote scheme. A failing cell is recorded and the sweep continues.
pub fn run_sweep(
    dataset: &QADataset,
    cells: &[GridCell],
    pipeline: &Pipeline,
    options: &SweepOptions,
) -> Result<SweepReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let max_depth = cells
        .iter()
        .map(|c| match c.config.mode {
            EvidenceMode::Document => c.config.top_k,
            EvidenceMode::Sentence => c.config.pool_size,
        })
        .max()
        .unwrap_or(0);
    pipeline.set_retrieval_depth_hint(max_depth);

    let mut answers_out = match &options.answers_path {
        Some(path) => Some((
            path.clone(),
            BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?),
        )),
        None => None,
    };
    let cache = AnswerCache::default();
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut config = cell.config;
        config.vote_scheme = dataset.scheme;
        let result = config
            .validate()
            .and_then(|_| pool.install(|| answer_all(pipeline, dataset, &config, &cache)));
        let outcome = match result {
            Ok(records) => {
                if let Some((path, out)) = answers_out.as_mut() {
                    for r in &records {
                        serde_json::to_writer(&mut *out, r)?;
                        out.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
                    }
                }
                let predictions: BTreeMap<String, Label> =
                    records.into_iter().map(|r| (r.question_id, r.verdict)).collect();
                match evaluate(&predictions, dataset) {
                    Ok(metrics) => CellOutcome::Ok { metrics },
                    Err(e) => CellOutcome::Failed { error: e.to_string() },
                }
            }
            Err(e) => {
                log::error!("cell {}={} failed: {e}", cell.param.as_str(), cell.value);
                CellOutcome::Failed { error: e.to_string() }
            }
        };
        rows.push(SweepRow {
            mode: config.mode,
            param: cell.param,
            value: cell.value,
            fingerprint: config.fingerprint(),
            config,
            n_questions: dataset.len(),
            outcome,
        });
    }
    if let Some((path, mut out)) = answers_out {
        out.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(SweepReport {
        dataset: dataset.name.clone(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

pub const CSV_HEADER: &str = "dataset,mode,param,value,macro_p,macro_r,macro_f1,n_questions";

fn pct(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

fn mode_str(mode: EvidenceMode) -> &'static str {
    match mode {
        EvidenceMode::Document => "document",
        EvidenceMode::Sentence => "sentence",
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Renders the report. Metrics are percentages with one decimal place.
pub fn render_report(report: &SweepReport, format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for row in &report.rows {
                let (p, r, f) = match &row.outcome {
                    CellOutcome::Ok { metrics } => (pct(metrics.macro_p), pct(metrics.macro_r), pct(metrics.macro_f1)),
                    CellOutcome::Failed { .. } => ("failed".into(), "failed".into(), "failed".into()),
                };
                out.push_str(&format!(
                    "{},{},{},{},{p},{r},{f},{}\n",
                    csv_field(&report.dataset),
                    mode_str(row.mode),
                    row.param.as_str(),
                    row.value,
                    row.n_questions
                ));
            }
        }
        ReportFormat::Markdown => {
            let heading = report.rows.first().map_or("Setting", |r| r.param.heading());
            out.push_str(&format!("| {heading} | P | R | F1 |\n"));
            out.push_str("|---:|---:|---:|---:|\n");
            for row in &report.rows {
                let label = match row.param {
                    SweepParam::MinYear | SweepParam::MinCitations => format!("≥{}", row.value),
                    _ => row.value.to_string(),
                };
                match &row.outcome {
                    CellOutcome::Ok { metrics } => out.push_str(&format!(
                        "| {label} | {} | {} | {} |\n",
                        pct(metrics.macro_p),
                        pct(metrics.macro_r),
                        pct(metrics.macro_f1)
                    )),
                    CellOutcome::Failed { .. } => out.push_str(&format!("| {label} | failed | failed | failed |\n")),
                }
            }
        }
    }
    out
}

pub fn emit_report(report: &SweepReport, format: ReportFormat, path: &Path) -> Result<()> {
    std::fs::write(path, render_report(report, format)).map_err(|e| Error::io(path, e))
}

/// Single-configuration report row, for `eval run`.
pub fn single_cell_report(dataset: &QADataset, config: &RetrievalConfig, metrics: MetricsReport) -> SweepReport {
    let (param, value) = match config.mode {
        EvidenceMode::Document => (SweepParam::TopK, config.top_k as i64),
        EvidenceMode::Sentence => (SweepParam::TopJ, config.top_j as i64),
    };
    SweepReport {
        dataset: dataset.name.clone(),
        rows: vec![SweepRow {
            mode: config.mode,
            param,
            value,
            config: *config,
            fingerprint: config.fingerprint(),
            n_questions: dataset.len(),
            outcome: CellOutcome::Ok { metrics },
        }],
    }
}

/// The four grids of the published experiments.
pub fn standard_grid(param: SweepParam) -> GridSpec {
    let values: &[i64] = match param {
        SweepParam::TopK => &[1, 5, 10, 15, 20, 50, 100],
        SweepParam::TopJ => &[1, 3, 5, 10, 15, 20],
        SweepParam::MinYear => &[2020, 2018, 2015, 2010, 2005, 2000, 1990, 1980],
        SweepParam::MinCitations => &[100, 75, 50, 25, 10, 5, 0],
    };
    GridSpec {
        base: None,
        param,
        values: values.to_vec(),
    }
}
