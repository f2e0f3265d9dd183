//! Evidence quality constraints (minimum year, minimum citations) and the
//! Semantic Scholar citation-count client with its JSONL cache.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusStore;
use crate::error::{Error, Result};
use crate::index::{DocMeta, Index, ScoredDocument};

/// Active evidence constraints. `None` means unconstrained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FilterSpec {
    pub min_year: Option<i32>,
    pub min_citations: Option<u64>,
}

impl FilterSpec {
    pub fn is_empty(&self) -> bool {
        self.min_year.is_none() && self.min_citations.is_none()
    }

    /// Unknown metadata fails any constraint that is active.
    pub fn admits(&self, year: Option<i32>, citations: Option<u64>) -> bool {
        let year_ok = match self.min_year {
            None => true,
            Some(min) => year.is_some_and(|y| y >= min),
        };
        let cites_ok = match self.min_citations {
            None => true,
            Some(min) => citations.is_some_and(|c| c >= min),
        };
        year_ok && cites_ok
    }

    /// True when everything `self` admits is also admitted by `other`.
    pub fn is_stricter_than(&self, other: &FilterSpec) -> bool {
        fn tighter<T: Ord>(a: Option<T>, b: Option<T>) -> bool {
            match (a, b) {
                (_, None) => true,
                (None, Some(_)) => false,
                (Some(a), Some(b)) => a >= b,
            }
        }
        tighter(self.min_year, other.min_year) && tighter(self.min_citations, other.min_citations)
    }
}

/// Where the filter sits relative to ranking.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterPlacement {
    /// Restrict the candidate pool, then take the top k survivors.
    PreRetrieval,
    /// Take the top k, then drop those failing the filter.
    #[default]
    PostRetrieval,
}

impl std::str::FromStr for FilterPlacement {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "pre_retrieval" | "pre" => Ok(FilterPlacement::PreRetrieval),
            "post_retrieval" | "post" => Ok(FilterPlacement::PostRetrieval),
            other => Err(format!("unknown filter placement {other:?}")),
        }
    }
}

/// Source of publication years for candidate documents.
pub trait YearSource {
    /// `None` when the document is unknown or has no year.
    fn year_of(&self, pmid: &str) -> Option<i32>;
}

impl YearSource for Index {
    fn year_of(&self, pmid: &str) -> Option<i32> {
        self.meta(pmid).and_then(|m| m.year)
    }
}

impl YearSource for CorpusStore {
    fn year_of(&self, pmid: &str) -> Option<i32> {
        self.get(pmid).ok().and_then(|d| d.year)
    }
}

impl YearSource for HashMap<String, Option<i32>> {
    fn year_of(&self, pmid: &str) -> Option<i32> {
        self.get(pmid).copied().flatten()
    }
}

/// Known citation counts keyed by PMID. Absent or `None` means unknown.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Citations(HashMap<String, Option<u64>>);

impl Citations {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, pmid: impl Into<String>, count: Option<u64>) {
        self.0.insert(pmid.into(), count);
    }

    pub fn get(&self, pmid: &str) -> Option<u64> {
        self.0.get(pmid).copied().flatten()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<CitationRecord> for Citations {
    fn from_iter<T: IntoIterator<Item = CitationRecord>>(iter: T) -> Self {
        Self(iter.into_iter().map(|r| (r.pmid, r.citation_count)).collect())
    }
}

/// Keeps the candidates that satisfy `spec`, in their original order and with
/// their original scores and ranks.
pub fn apply(
    candidates: &[ScoredDocument],
    spec: &FilterSpec,
    years: &dyn YearSource,
    citations: &Citations,
) -> Vec<ScoredDocument> {
    if spec.is_empty() {
        return candidates.to_vec();
    }
    candidates
        .iter()
        .filter(|c| spec.admits(years.year_of(&c.pmid), citations.get(&c.pmid)))
        .cloned()
        .collect()
}

/// The same constraint as [`apply`], in the shape [`Index::search`] accepts.
pub fn predicate<'a>(
    spec: &'a FilterSpec,
    citations: &'a Citations,
) -> impl Fn(&DocMeta<'_>) -> bool + 'a {
    move |meta| spec.admits(meta.year, citations.get(meta.pmid))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitationRecord {
    pub pmid: String,
    /// `None` when the count is unknown.
    pub citation_count: Option<u64>,
    pub fetched_at: DateTime<Utc>,
}

/// Append-only JSONL cache; on load the last record for a PMID wins.
#[derive(Debug)]
pub struct CitationCache {
    path: PathBuf,
    records: HashMap<String, CitationRecord>,
}

impl CitationCache {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut records = HashMap::new();
        match File::open(&path) {
            Ok(file) => {
                for (n, line) in BufReader::new(file).lines().enumerate() {
                    let line = line.map_err(|e| Error::io(&path, e))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let record: CitationRecord =
                        serde_json::from_str(&line).map_err(|e| Error::Parse {
                            path: path.clone(),
                            line: n + 1,
                            message: e.to_string(),
                        })?;
                    records.insert(record.pmid.clone(), record);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(Error::io(&path, e)),
        }
        Ok(Self { path, records })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, pmid: &str) -> Option<&CitationRecord> {
        self.records.get(pmid)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn citations(&self) -> Citations {
        self.records.values().cloned().collect()
    }

    fn append(&mut self, new: &[CitationRecord]) -> Result<()> {
        if new.is_empty() {
            return Ok(());
        }
        if let Some(parent) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        let mut out = BufWriter::new(file);
        for record in new {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))?;
            self.records.insert(record.pmid.clone(), record.clone());
        }
        out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Result of a single lookup against a citation service.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FetchOutcome {
    Count(u64),
    NotFound,
    RateLimited,
    Failed(String),
}

pub trait CitationSource {
    fn fetch(&self, pmid: &str) -> FetchOutcome;
}

pub const SEMANTIC_SCHOLAR_URL: &str = "https://api.semanticscholar.org/graph/v1";

/// `GET {base}/paper/PMID:{pmid}?fields=citationCount`.
pub struct SemanticScholar {
    base_url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl SemanticScholar {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            agent,
        }
    }
}

#[derive(Deserialize)]
struct PaperCitations {
    #[serde(rename = "citationCount")]
    citation_count: Option<u64>,
}

impl CitationSource for SemanticScholar {
    fn fetch(&self, pmid: &str) -> FetchOutcome {
        let url = format!("{}/paper/PMID:{pmid}?fields=citationCount", self.base_url);
        let mut request = self.agent.get(&url);
        if let Some(key) = &self.api_key {
            request = request.header("x-api-key", key);
        }
        let mut response = match request.call() {
            Ok(r) => r,
            Err(e) => return FetchOutcome::Failed(e.to_string()),
        };
        match response.status().as_u16() {
            200 => match response.body_mut().read_json::<PaperCitations>() {
                Ok(PaperCitations {
                    citation_count: Some(n),
                }) => FetchOutcome::Count(n),
                Ok(_) => FetchOutcome::Failed("response has no citationCount".into()),
                Err(e) => FetchOutcome::Failed(format!("bad response body: {e}")),
            },
            404 => FetchOutcome::NotFound,
            429 => FetchOutcome::RateLimited,
            other => FetchOutcome::Failed(format!("HTTP {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FetchOptions {
    /// Requests per second; non-positive disables pacing.
    pub rate: f64,
    pub max_attempts: u32,
    /// First backoff after a 429; doubles on each retry.
    pub backoff: Duration,
}

impl Default for FetchOptions {
    fn default() -> Self {
        Self {
            rate: 1.0,
            max_attempts: 5,
            backoff: Duration::from_secs(1),
        }
    }
}

struct Pacer {
    interval: Option<Duration>,
    last: Option<Instant>,
}

impl Pacer {
    fn new(rate: f64) -> Self {
        let interval = (rate > 0.0 && rate.is_finite()).then(|| Duration::from_secs_f64(1.0 / rate));
        Self { interval, last: None }
    }

    fn wait(&mut self) {
        if let (Some(interval), Some(last)) = (self.interval, self.last) {
            let elapsed = last.elapsed();
            if elapsed < interval {
                thread::sleep(interval - elapsed);
            }
        }
        self.last = Some(Instant::now());
    }
}

/// Returns one record per requested PMID (duplicates collapsed, first-seen
/// order). Cached PMIDs are never re-fetched. Counts and 404s are appended to
/// the cache; transient failures come back as unknown but are not cached, so a
/// later run retries them.
pub fn fetch_citations(
    pmids: &[String],
    cache: &mut CitationCache,
    source: &dyn CitationSource,
    options: FetchOptions,
) -> Result<Vec<CitationRecord>> {
    let mut pacer = Pacer::new(options.rate);
    let mut out = Vec::with_capacity(pmids.len());
    let mut fresh = Vec::new();
    let mut seen = std::collections::HashSet::new();

    for pmid in pmids {
        if !seen.insert(pmid.as_str()) {
            continue;
        }
        if let Some(hit) = cache.get(pmid) {
            out.push(hit.clone());
            continue;
        }
        let mut attempt = 0;
        let (count, cacheable) = loop {
            attempt += 1;
            pacer.wait();
            match source.fetch(pmid) {
                FetchOutcome::Count(n) => break (Some(n), true),
                FetchOutcome::NotFound => break (None, true),
                FetchOutcome::RateLimited if attempt < options.max_attempts => {
                    let delay = options.backoff * 2u32.saturating_pow(attempt - 1);
                    log::debug!("rate limited on PMID {pmid}; retrying in {delay:?}");
                    thread::sleep(delay);
                }
                FetchOutcome::RateLimited => {
                    log::warn!("PMID {pmid}: still rate limited after {attempt} attempts");
                    break (None, false);
                }
                FetchOutcome::Failed(why) => {
                    log::warn!("PMID {pmid}: citation lookup failed: {why}");
                    break (None, false);
                }
            }
        };
        let record = CitationRecord {
            pmid: pmid.clone(),
            citation_count: count,
            fetched_at: Utc::now(),
        };
        if cacheable {
            fresh.push(record.clone());
        }
        out.push(record);
    }
    cache.append(&fresh)?;
    Ok(out)
}
