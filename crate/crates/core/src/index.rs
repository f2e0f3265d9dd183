//! Okapi BM25 over an in-memory inverted index, persisted as `index.bin`.
//!
//! Documents are numbered in PMID order, so breaking score ties by document
//! number is the same as breaking them by ascending PMID.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{pmid_cmp, CorpusStore, Document};
use crate::error::{Error, Result};
use crate::tokenize::{Analyzer, TokenizerOptions};

pub const MAGIC: &[u8; 6] = b"EQIDX1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`, positive for every `df <= N`.
    pub fn idf(doc_count: u64, df: u64) -> f64 {
        let n = doc_count as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    pub fn term_weight(&self, idf: f64, tf: u32, doc_len: u32, avg_doc_len: f64) -> f64 {
        let tf = tf as f64;
        let norm = 1.0 - self.b + self.b * doc_len as f64 / avg_doc_len;
        idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm)
    }
}

/// Which document fields feed the index.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexFields {
    #[default]
    TitleAbstract,
    Abstract,
}

impl IndexFields {
    pub fn text(&self, doc: &Document) -> String {
        match self {
            IndexFields::TitleAbstract => format!("{} {}", doc.title, doc.abstract_text),
            IndexFields::Abstract => doc.abstract_text.clone(),
        }
    }
}

impl std::str::FromStr for IndexFields {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "title_abstract" => Ok(IndexFields::TitleAbstract),
            "abstract" => Ok(IndexFields::Abstract),
            other => Err(format!("unknown index fields {other:?} (expected title_abstract|abstract)")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IndexOptions {
    pub params: Bm25Params,
    pub fields: IndexFields,
    pub tokenizer: TokenizerOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexStats {
    pub doc_count: u64,
    pub avg_doc_len: f64,
    pub df: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDocument {
    pub pmid: String,
    pub score: f64,
    pub rank: usize,
}

/// Metadata visible to a candidate filter during search.
#[derive(Debug, Clone, Copy)]
pub struct DocMeta<'a> {
    pub pmid: &'a str,
    pub year: Option<i32>,
}

#[derive(Debug, Clone, PartialEq)]
struct DocEntry {
    pmid: String,
    year: Option<i32>,
    len: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Posting {
    doc: u32,
    tf: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    options: IndexOptions,
    doc_count: u64,
    term_count: u64,
    total_len: u64,
}

#[derive(Debug)]
pub struct Index {
    options: IndexOptions,
    analyzer: Analyzer,
    docs: Vec<DocEntry>,
    terms: Vec<String>,
    term_ids: HashMap<String, u32>,
    postings: Vec<Vec<Posting>>,
    total_len: u64,
}

impl Index {
    pub fn build(store: &CorpusStore, options: IndexOptions) -> Result<Self> {
        let docs = store.iter()?.collect::<Result<Vec<_>>>()?;
        Ok(Self::from_documents(docs, options))
    }

    /// Builds from any document collection. Order of `docs` does not matter;
    /// a later duplicate PMID replaces an earlier one.
    pub fn from_documents<I>(docs: I, options: IndexOptions) -> Self
    where
        I: IntoIterator<Item = Document>,
    {
        let mut by_pmid: BTreeMap<SortKey, Document> = BTreeMap::new();
        for doc in docs {
            by_pmid.insert(SortKey(doc.pmid.clone()), doc);
        }
        let analyzer = Analyzer::new(options.tokenizer);
        let mut entries = Vec::with_capacity(by_pmid.len());
        let mut dictionary: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut total_len = 0u64;
        let mut counts: BTreeMap<String, u32> = BTreeMap::new();
        for (doc_id, doc) in by_pmid.into_values().enumerate() {
            let tokens = analyzer.analyze(&options.fields.text(&doc));
            counts.clear();
            for token in &tokens {
                *counts.entry(token.clone()).or_default() += 1;
            }
            for (term, tf) in std::mem::take(&mut counts) {
                dictionary.entry(term).or_default().push(Posting {
                    doc: doc_id as u32,
                    tf,
                });
            }
            total_len += tokens.len() as u64;
            entries.push(DocEntry {
                pmid: doc.pmid,
                year: doc.year,
                len: tokens.len() as u32,
            });
        }
        let (terms, postings): (Vec<_>, Vec<_>) = dictionary.into_iter().unzip();
        Self::assemble(options, entries, terms, postings, total_len)
    }

    fn assemble(
        options: IndexOptions,
        docs: Vec<DocEntry>,
        terms: Vec<String>,
        postings: Vec<Vec<Posting>>,
        total_len: u64,
    ) -> Self {
        let term_ids = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            analyzer: Analyzer::new(options.tokenizer),
            options,
            docs,
            terms,
            term_ids,
            postings,
            total_len,
        }
    }

    pub fn options(&self) -> &IndexOptions {
        &self.options
    }

    pub fn doc_count(&self) -> u64 {
        self.docs.len() as u64
    }

    pub fn avg_doc_len(&self) -> f64 {
        if self.docs.is_empty() {
            0.0
        } else {
            self.total_len as f64 / self.docs.len() as f64
        }
    }

    pub fn df(&self, term: &str) -> u64 {
        self.term_ids
            .get(term)
            .map_or(0, |&id| self.postings[id as usize].len() as u64)
    }

    pub fn tf(&self, term: &str, pmid: &str) -> Option<u32> {
        let doc = self.doc_id(pmid)?;
        let id = *self.term_ids.get(term)?;
        let list = &self.postings[id as usize];
        list.binary_search_by_key(&doc, |p| p.doc)
            .ok()
            .map(|i| list[i].tf)
    }

    pub fn doc_len(&self, pmid: &str) -> Option<u32> {
        self.doc_id(pmid).map(|d| self.docs[d as usize].len)
    }

    pub fn stats(&self) -> IndexStats {
        IndexStats {
            doc_count: self.doc_count(),
            avg_doc_len: self.avg_doc_len(),
            df: self
                .terms
                .iter()
                .zip(&self.postings)
                .map(|(t, p)| (t.clone(), p.len() as u64))
                .collect(),
        }
    }

    pub fn meta(&self, pmid: &str) -> Option<DocMeta<'_>> {
        self.doc_id(pmid).map(|d| self.meta_of(d))
    }

    fn meta_of(&self, doc: u32) -> DocMeta<'_> {
        let entry = &self.docs[doc as usize];
        DocMeta {
            pmid: &entry.pmid,
            year: entry.year,
        }
    }

    fn doc_id(&self, pmid: &str) -> Option<u32> {
        self.docs
            .binary_search_by(|d| pmid_cmp(&d.pmid, pmid).then_with(|| d.pmid.as_str().cmp(pmid)))
            .ok()
            .map(|i| i as u32)
    }

    pub fn analyze(&self, text: &str) -> Vec<String> {
        self.analyzer.analyze(text)
    }

    /// Distinct known query terms in sorted order, so that every path sums
    /// contributions in the same order.
    fn query_term_ids(&self, terms: &[String]) -> Vec<u32> {
        let mut ids: Vec<u32> = terms
            .iter()
            .filter_map(|t| self.term_ids.get(t).copied())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// BM25 score of one document. Repeated query terms count once.
    pub fn score(&self, query_terms: &[String], pmid: &str) -> Result<f64> {
        let doc = self
            .doc_id(pmid)
            .ok_or_else(|| Error::NotFound(pmid.to_string()))?;
        let len = self.docs[doc as usize].len;
        let avg = self.avg_doc_len();
        let mut score = 0.0;
        for id in self.query_term_ids(query_terms) {
            let list = &self.postings[id as usize];
            if let Ok(i) = list.binary_search_by_key(&doc, |p| p.doc) {
                let idf = Bm25Params::idf(self.doc_count(), list.len() as u64);
                score += self.options.params.term_weight(idf, list[i].tf, len, avg);
            }
        }
        Ok(score)
    }

    pub fn search(
        &self,
        question: &str,
        k: usize,
        filter: Option<&dyn Fn(&DocMeta<'_>) -> bool>,
    ) -> Vec<ScoredDocument> {
        self.search_terms(&self.analyze(question), k, filter)
    }

    /// Top-`k` documents with positive score that pass `filter`, ordered by
    /// descending score then ascending PMID.
    pub fn search_terms(
        &self,
        terms: &[String],
        k: usize,
        filter: Option<&dyn Fn(&DocMeta<'_>) -> bool>,
    ) -> Vec<ScoredDocument> {
        if k == 0 || self.docs.is_empty() {
            return Vec::new();
        }
        let ids = self.query_term_ids(terms);
        let avg = self.avg_doc_len();
        let n = self.doc_count();
        let params = self.options.params;

        let mut scores: HashMap<u32, f64> = HashMap::new();
        for &id in &ids {
            let list = &self.postings[id as usize];
            let idf = Bm25Params::idf(n, list.len() as u64);
            for p in list {
                let len = self.docs[p.doc as usize].len;
                *scores.entry(p.doc).or_insert(0.0) += params.term_weight(idf, p.tf, len, avg);
            }
        }

        let mut hits: Vec<(u32, f64)> = scores
            .into_iter()
            .filter(|&(_, s)| s > 0.0)
            .filter(|&(doc, _)| filter.is_none_or(|f| f(&self.meta_of(doc))))
            .collect();
        let order = |a: &(u32, f64), b: &(u32, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, order);
            hits.truncate(k);
        }
        hits.sort_unstable_by(order);
        hits.into_iter()
            .enumerate()
            .map(|(i, (doc, score))| ScoredDocument {
                pmid: self.docs[doc as usize].pmid.clone(),
                score,
                rank: i + 1,
            })
            .collect()
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.encode(&mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    fn encode<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let header = Header {
            format_version: FORMAT_VERSION,
            options: self.options,
            doc_count: self.doc_count(),
            term_count: self.terms.len() as u64,
            total_len: self.total_len,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        out.write_all(MAGIC)?;
        put_u32(out, header.len() as u32)?;
        out.write_all(&header)?;
        for doc in &self.docs {
            put_bytes(out, doc.pmid.as_bytes())?;
            match doc.year {
                Some(y) => {
                    out.write_all(&[1])?;
                    out.write_all(&y.to_le_bytes())?;
                }
                None => out.write_all(&[0, 0, 0, 0, 0])?,
            }
            put_u32(out, doc.len)?;
        }
        for (term, list) in self.terms.iter().zip(&self.postings) {
            put_bytes(out, term.as_bytes())?;
            put_u32(out, list.len() as u32)?;
            let mut prev = 0u32;
            for p in list {
                put_u32(out, p.doc - prev)?;
                put_u32(out, p.tf)?;
                prev = p.doc;
            }
        }
        Ok(())
    }

    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::IndexFormat("bad magic (expected EQIDX1)".into()));
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::IndexFormat(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::IndexFormat(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let mut docs = Vec::with_capacity(header.doc_count as usize);
        for _ in 0..header.doc_count {
            let pmid = r.string()?;
            let has_year = r.take(1)?[0];
            let year = i32::from_le_bytes(r.take(4)?.try_into().unwrap());
            let len = r.u32()?;
            docs.push(DocEntry {
                pmid,
                year: (has_year == 1).then_some(year),
                len,
            });
        }
        let mut terms = Vec::with_capacity(header.term_count as usize);
        let mut postings = Vec::with_capacity(header.term_count as usize);
        for _ in 0..header.term_count {
            let term = r.string()?;
            let df = r.u32()? as usize;
            let mut list = Vec::with_capacity(df);
            let mut doc = 0u32;
            for _ in 0..df {
                doc = doc
                    .checked_add(r.u32()?)
                    .filter(|d| (*d as u64) < header.doc_count)
                    .ok_or_else(|| Error::IndexFormat(format!("posting out of range for {term:?}")))?;
                list.push(Posting { doc, tf: r.u32()? });
            }
            terms.push(term);
            postings.push(list);
        }
        if r.pos != bytes.len() {
            return Err(Error::IndexFormat(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self::assemble(header.options, docs, terms, postings, header.total_len))
    }
}

#[derive(PartialEq, Eq)]
struct SortKey(String);

impl Ord for SortKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        pmid_cmp(&self.0, &other.0).then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for SortKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

fn put_u32<W: Write>(out: &mut W, v: u32) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

fn put_bytes<W: Write>(out: &mut W, b: &[u8]) -> std::io::Result<()> {
    put_u32(out, b.len() as u32)?;
    out.write_all(b)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::IndexFormat("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::IndexFormat("invalid UTF-8 string".into()))
    }
}
