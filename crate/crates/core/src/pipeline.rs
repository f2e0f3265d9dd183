//! Retrieve-then-read: BM25 retrieval, optional filtering and sentence
//! selection, per-evidence entailment and the final vote.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::corpus::CorpusStore;
use crate::error::{Error, Result};
use crate::filter::{self, Citations, FilterPlacement, FilterSpec};
use crate::index::{Index, ScoredDocument};
use crate::reader::{
    label_with_threshold, AnswerRecord, EntailmentScorer, EvidenceItem, EvidenceMode, Label,
    RetrievalConfig, VoteCounts,
};
use crate::sentences::{self, EmbeddingProvider, PooledDocument, TfIdfEmbedder};

pub const DEFAULT_MAX_EVIDENCE_TOKENS: usize = 480;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReaderOptions {
    /// Evidence whose winning probability is below this votes NEI.
    pub min_confidence: Option<f64>,
    /// Full documents are cut to this many whitespace-separated words.
    pub max_evidence_tokens: usize,
}

impl Default for ReaderOptions {
    fn default() -> Self {
        Self {
            min_confidence: None,
            max_evidence_tokens: DEFAULT_MAX_EVIDENCE_TOKENS,
        }
    }
}

/// How sentence embeddings are produced.
pub enum Embedder {
    /// TF-IDF fitted per question over the question and its sentence pool.
    TfIdf,
    Provider(Box<dyn EmbeddingProvider>),
}

impl std::fmt::Debug for Embedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Embedder::TfIdf => f.write_str("TfIdf"),
            Embedder::Provider(_) => f.write_str("Provider(..)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct RetrievalKey {
    question: String,
    pool_filter: Option<FilterSpec>,
}

/// Memoised BM25 lists. A list computed for depth `k` answers any request for
/// depth `<= k` by truncation, because the ranking is a total order.
/// A ranked list together with the depth it was computed for.
type CachedList = (usize, Arc<Vec<ScoredDocument>>);

#[derive(Debug, Default)]
struct RetrievalCache {
    depth_hint: AtomicUsize,
    lists: Mutex<HashMap<RetrievalKey, CachedList>>,
}

pub struct Pipeline {
    index: Index,
    store: CorpusStore,
    citations: Citations,
    scorer: Box<dyn EntailmentScorer>,
    embedder: Embedder,
    reader: ReaderOptions,
    embed_batch: usize,
    cache: RetrievalCache,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("docs", &self.index.doc_count())
            .field("embedder", &self.embedder)
            .field("reader", &self.reader)
            .finish()
    }
}

impl Pipeline {
    pub fn new(
        index: Index,
        store: CorpusStore,
        scorer: Box<dyn EntailmentScorer>,
        embedder: Embedder,
    ) -> Self {
        Self {
            index,
            store,
            citations: Citations::new(),
            scorer,
            embedder,
            reader: ReaderOptions::default(),
            embed_batch: crate::service::DEFAULT_BATCH,
            cache: RetrievalCache::default(),
        }
    }

    pub fn with_citations(mut self, citations: Citations) -> Self {
        self.citations = citations;
        self
    }

    pub fn with_reader_options(mut self, reader: ReaderOptions) -> Self {
        self.reader = reader;
        self
    }

    pub fn with_embed_batch(mut self, batch: usize) -> Self {
        self.embed_batch = batch.max(1);
        self
    }

    pub fn index(&self) -> &Index {
        &self.index
    }

    pub fn store(&self) -> &CorpusStore {
        &self.store
    }

    pub fn citations(&self) -> &Citations {
        &self.citations
    }

    /// Retrieval depth to compute on every cache miss, so that later requests
    /// for smaller depths are served from the cache.
    pub fn set_retrieval_depth_hint(&self, depth: usize) {
        self.cache.depth_hint.store(depth, Ordering::Relaxed);
    }

    fn ranked(&self, question: &str, depth: usize, pool_filter: Option<FilterSpec>) -> Vec<ScoredDocument> {
        let key = RetrievalKey {
            question: question.to_string(),
            pool_filter,
        };
        if let Some((computed, list)) = self.cache.lists.lock().unwrap().get(&key) {
            if *computed >= depth || list.len() < *computed {
                return list.iter().take(depth).cloned().collect();
            }
        }
        let fetch = depth.max(self.cache.depth_hint.load(Ordering::Relaxed));
        let list = match &pool_filter {
            Some(spec) => {
                let pred = filter::predicate(spec, &self.citations);
                self.index.search(question, fetch, Some(&pred))
            }
            None => self.index.search(question, fetch, None),
        };
        let list = Arc::new(list);
        let out = list.iter().take(depth).cloned().collect();
        let mut lists = self.cache.lists.lock().unwrap();
        let keep = lists.get(&key).is_none_or(|(c, _)| *c < fetch);
        if keep {
            lists.insert(key, (fetch, list));
        }
        out
    }

    /// The documents the reader sees for `question` under `config`, after
    /// filtering.
    pub fn retrieve(&self, question: &str, config: &RetrievalConfig) -> Vec<ScoredDocument> {
        let depth = match config.mode {
            EvidenceMode::Document => config.top_k,
            EvidenceMode::Sentence => config.pool_size,
        };
        if config.filter.is_empty() {
            return self.ranked(question, depth, None);
        }
        match config.filter_placement {
            FilterPlacement::PreRetrieval => self.ranked(question, depth, Some(config.filter)),
            FilterPlacement::PostRetrieval => {
                let top = self.ranked(question, depth, None);
                filter::apply(&top, &config.filter, &self.index, &self.citations)
            }
        }
    }

    pub fn answer(&self, question_id: &str, question: &str, config: &RetrievalConfig) -> Result<AnswerRecord> {
        config.validate()?;
        let with_id = |e: Error| Error::Question {
            question_id: question_id.to_string(),
            message: e.to_string(),
        };
        let docs = self.retrieve(question, config);
        let candidates = match config.mode {
            EvidenceMode::Document => self.document_evidence(&docs).map_err(with_id)?,
            EvidenceMode::Sentence => self
                .sentence_evidence(question, &docs, config.top_j)
                .map_err(with_id)?,
        };

        let pairs: Vec<(String, String)> = candidates
            .iter()
            .map(|c| (c.text.clone(), question.to_string()))
            .collect();
        let scores = self.scorer.score_batch(&pairs).map_err(with_id)?;
        if scores.len() != pairs.len() {
            return Err(with_id(Error::Service(format!(
                "scorer returned {} scores for {} pairs",
                scores.len(),
                pairs.len()
            ))));
        }
        let evidence: Vec<EvidenceItem> = candidates
            .into_iter()
            .zip(scores)
            .map(|(c, score)| EvidenceItem {
                label: label_with_threshold(&score, self.reader.min_confidence),
                entailment: score,
                text: c.text,
                pmid: c.pmid,
                doc_rank: c.doc_rank,
                sent_index: c.sent_index,
                retrieval_score: c.retrieval_score,
            })
            .collect();
        let labels: Vec<Label> = evidence.iter().map(|e| e.label).collect();
        let vote_counts = VoteCounts::from_labels(&labels);
        let defaulted = vote_counts.effective(config.vote_scheme) == 0;
        if defaulted && !evidence.is_empty() {
            log::debug!("{question_id}: no effective votes, using the scheme default");
        }
        Ok(AnswerRecord {
            question_id: question_id.to_string(),
            question: question.to_string(),
            verdict: vote_counts.verdict(config.vote_scheme),
            vote_counts,
            defaulted,
            evidence,
            config_fingerprint: config.fingerprint(),
        })
    }

    fn document_evidence(&self, docs: &[ScoredDocument]) -> Result<Vec<Candidate>> {
        docs.iter()
            .map(|d| {
                let doc = self.store.get(&d.pmid)?;
                let text = format!("{} {}", doc.title, doc.abstract_text);
                Ok(Candidate {
                    text: truncate_words(text.trim(), self.reader.max_evidence_tokens),
                    pmid: d.pmid.clone(),
                    doc_rank: d.rank,
                    sent_index: None,
                    retrieval_score: d.score,
                })
            })
            .collect()
    }

    fn sentence_evidence(&self, question: &str, docs: &[ScoredDocument], top_j: usize) -> Result<Vec<Candidate>> {
        let loaded = docs
            .iter()
            .map(|d| self.store.get(&d.pmid).map(|doc| (d.rank, doc)))
            .collect::<Result<Vec<_>>>()?;
        let pooled: Vec<PooledDocument<'_>> = loaded
            .iter()
            .map(|(rank, doc)| PooledDocument {
                pmid: &doc.pmid,
                rank: *rank,
                abstract_text: &doc.abstract_text,
            })
            .collect();
        let pool = sentences::pool_sentences(&pooled);
        let selected = match &self.embedder {
            Embedder::TfIdf => {
                let mut texts = Vec::with_capacity(pool.len() + 1);
                texts.push(question);
                texts.extend(pool.iter().map(|s| s.text.as_str()));
                let fitted = TfIdfEmbedder::fit(&texts);
                sentences::rank_sentences(question, pool, top_j, &fitted, self.embed_batch)?
            }
            Embedder::Provider(p) => {
                sentences::rank_sentences(question, pool, top_j, p.as_ref(), self.embed_batch)?
            }
        };
        Ok(selected
            .into_iter()
            .map(|s| Candidate {
                text: s.text,
                pmid: s.source_pmid,
                doc_rank: s.doc_rank,
                sent_index: Some(s.sent_index),
                retrieval_score: s.similarity,
            })
            .collect())
    }
}

struct Candidate {
    text: String,
    pmid: String,
    doc_rank: usize,
    sent_index: Option<usize>,
    retrieval_score: f64,
}

/// First `max_words` whitespace-separated words of `text`, original spacing kept.
pub fn truncate_words(text: &str, max_words: usize) -> String {
    let mut words = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            in_word = false;
        } else if !in_word {
            in_word = true;
            words += 1;
            if words > max_words {
                return text[..i].trim_end().to_string();
            }
        }
    }
    text.to_string()
}
