//! Fixtures shared by the integration tests: on-disk corpora, brute-force
//! oracles, a tiny HTTP server and the synthetic trend corpora.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use healthqa::corpus::{self, CorpusStore, Document};
use healthqa::eval::QADataset;
use healthqa::filter::Citations;
use healthqa::index::{Index, IndexOptions};
use healthqa::pipeline::{Embedder, Pipeline};
use healthqa::reader::{Label, OverlapScorer, VoteScheme};

pub fn doc(pmid: &str, title: &str, abstract_text: &str, year: Option<i32>) -> Document {
    Document {
        pmid: pmid.into(),
        title: title.into(),
        abstract_text: abstract_text.into(),
        year,
        language: "en".into(),
        citation_count: None,
    }
}

/// A store and index on disk, built through the public ingest path.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub store_dir: PathBuf,
    pub index_path: PathBuf,
}

impl Fixture {
    pub fn new(docs: &[Document]) -> Self {
        Self::with_options(docs, IndexOptions::default())
    }

    pub fn with_options(docs: &[Document], options: IndexOptions) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("docs.jsonl");
        write_jsonl(&input, docs);
        let store_dir = dir.path().join("store");
        let stats = corpus::ingest(&[&input], &store_dir).unwrap();
        assert_eq!(stats.accepted as usize, docs.len(), "fixture documents must all be accepted");
        let index_path = dir.path().join("index.bin");
        let store = CorpusStore::open(&store_dir).unwrap();
        Index::build(&store, options).unwrap().write_to(&index_path).unwrap();
        Self {
            dir,
            store_dir,
            index_path,
        }
    }

    pub fn store(&self) -> CorpusStore {
        CorpusStore::open(&self.store_dir).unwrap()
    }

    pub fn index(&self) -> Index {
        Index::open(&self.index_path).unwrap()
    }

    /// Fallback reader: overlap scorer plus TF-IDF sentence embeddings.
    pub fn pipeline(&self) -> Pipeline {
        Pipeline::new(self.index(), self.store(), Box::new(OverlapScorer::default()), Embedder::TfIdf)
    }

    pub fn pipeline_with_citations(&self, citations: Citations) -> Pipeline {
        self.pipeline().with_citations(citations)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

pub fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) {
    let mut out = std::fs::File::create(path).unwrap();
    for item in items {
        serde_json::to_writer(&mut out, item).unwrap();
        out.write_all(b"\n").unwrap();
    }
}

/// Okapi BM25 evaluated directly over whitespace tokens of every document.
/// Returns `(pmid, score)` for positive scores, best first, ties by numeric PMID.
pub fn bm25_brute_force(docs: &[(String, Vec<String>)], query: &[String], k1: f64, b: f64) -> Vec<(String, f64)> {
    let n = docs.len() as f64;
    let avg = docs.iter().map(|(_, t)| t.len()).sum::<usize>() as f64 / n;
    let terms: Vec<&String> = query.iter().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let df: Vec<f64> = terms
        .iter()
        .map(|term| docs.iter().filter(|(_, d)| d.contains(term)).count() as f64)
        .collect();
    let mut scored: Vec<(String, f64)> = docs
        .iter()
        .map(|(pmid, tokens)| {
            let mut score = 0.0;
            for (term, &df) in terms.iter().zip(&df) {
                let tf = tokens.iter().filter(|t| t == term).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * tokens.len() as f64 / avg));
            }
            (pmid.clone(), score)
        })
        .filter(|(_, s)| *s > 0.0)
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then_with(|| a.0.parse::<u64>().unwrap().cmp(&b.0.parse::<u64>().unwrap()))
    });
    scored
}

/// Per-class (precision, recall, f1) and the macro means, counted from an
/// explicit confusion matrix.
pub fn macro_oracle(pairs: &[(Label, Label)], classes: &[Label]) -> (f64, f64, f64) {
    let mut confusion: HashMap<(Label, Label), usize> = HashMap::new();
    for &(g, p) in pairs {
        *confusion.entry((g, p)).or_default() += 1;
    }
    let cell = |g: Label, p: Label| *confusion.get(&(g, p)).unwrap_or(&0) as f64;
    let all = [Label::Refuted, Label::Supported, Label::NotEnoughInfo];
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for &c in classes {
        let tp = cell(c, c);
        let col: f64 = all.iter().map(|&g| cell(g, c)).sum();
        let row: f64 = all.iter().map(|&p| cell(c, p)).sum();
        let p = if col == 0.0 { 0.0 } else { tp / col };
        let r = if row == 0.0 { 0.0 } else { tp / row };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        p_sum += p;
        r_sum += r;
        f_sum += f;
    }
    let n = classes.len() as f64;
    (p_sum / n, r_sum / n, f_sum / n)
}

#[derive(Debug, Clone)]
pub struct Request {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl Request {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

pub struct MockServer {
    pub url: String,
    pub requests: Arc<AtomicUsize>,
}

impl MockServer {
    pub fn hits(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

/// Serves `handler` on an ephemeral localhost port, one thread per connection.
pub fn serve<F>(handler: F) -> MockServer
where
    F: Fn(&Request) -> (u16, String) + Send + Sync + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let requests = Arc::new(AtomicUsize::new(0));
    let counter = requests.clone();
    let handler = Arc::new(handler);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let handler = handler.clone();
            let counter = counter.clone();
            std::thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    return;
                }
                let mut parts = line.split_whitespace();
                let method = parts.next().unwrap_or_default().to_string();
                let path = parts.next().unwrap_or_default().to_string();
                let mut headers = Vec::new();
                loop {
                    let mut h = String::new();
                    reader.read_line(&mut h).unwrap();
                    let h = h.trim_end();
                    if h.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = h.split_once(':') {
                        headers.push((k.trim().to_string(), v.trim().to_string()));
                    }
                }
                let len = headers
                    .iter()
                    .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
                    .map_or(0, |(_, v)| v.parse().unwrap());
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                counter.fetch_add(1, Ordering::SeqCst);
                let request = Request {
                    method,
                    path,
                    headers,
                    body: String::from_utf8(body).unwrap(),
                };
                let (status, body) = handler(&request);
                let response = format!(
                    "HTTP/1.1 {status} Mock\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(response.as_bytes());
            });
        }
    });
    MockServer { url, requests }
}

/// A labelled question together with the corpus built for it.
pub struct Synthetic {
    pub docs: Vec<Document>,
    pub dataset: QADataset,
    /// PMID of the one abstract that states the gold answer most directly.
    pub authoritative: BTreeMap<String, String>,
}

fn gold_for(i: usize) -> Label {
    if i.is_multiple_of(2) {
        Label::Supported
    } else {
        Label::Refuted
    }
}

fn agreeing(gold: Label, drug: &str, cond: &str) -> String {
    match gold {
        Label::Supported => format!("{drug} was beneficial in {cond}. Patients with {cond} given {drug} improved."),
        _ => format!("{drug} was not beneficial in {cond}. Patients with {cond} given {drug} did not improve."),
    }
}

fn contradicting(gold: Label, drug: &str, cond: &str) -> String {
    let filler = "among adults followed over several years at regional clinics with routine visits";
    match gold {
        Label::Supported => format!("In this cohort {drug} was not beneficial for {cond} {filler}."),
        _ => format!("In this cohort {drug} was beneficial for {cond} {filler}."),
    }
}

fn question(i: usize) -> (String, String, String) {
    let drug = format!("drug{i}x");
    let cond = format!("cond{i}x");
    (format!("Is {drug} beneficial in {cond}?"), drug, cond)
}

/// 20 questions x 25 abstracts = 500 documents. Each question has one short
/// abstract that repeats its terms and agrees with gold (the BM25 top hit)
/// and 24 longer abstracts that contradict gold.
pub fn topk_corpus() -> Synthetic {
    let mut docs = Vec::new();
    let mut instances = Vec::new();
    let mut authoritative = BTreeMap::new();
    for i in 0..20 {
        let gold = gold_for(i);
        let (q, drug, cond) = question(i);
        let base = i * 25;
        let pmid = (base + 1).to_string();
        docs.push(doc(&pmid, &format!("{drug} in {cond}"), &agreeing(gold, &drug, &cond), Some(2020)));
        authoritative.insert(format!("q{i:02}"), pmid);
        for j in 2..=25 {
            docs.push(doc(
                &(base + j).to_string(),
                &format!("Cohort report {j}"),
                &contradicting(gold, &drug, &cond),
                Some(2020),
            ));
        }
        instances.push(healthqa::eval::QAInstance {
            id: format!("q{i:02}"),
            question: q,
            gold,
        });
    }
    Synthetic {
        docs,
        dataset: QADataset {
            name: "synthetic-topk".into(),
            scheme: VoteScheme::Binary,
            instances,
        },
        authoritative,
    }
}

/// 12 questions with 7 abstracts each. Abstracts from 2015 onwards agree
/// with gold; those before 2010, and one from 2012, contradict it. Half of
/// the questions keep two contradicting abstracts after 2000, the other half
/// keep three.
pub fn year_corpus() -> Synthetic {
    let mut docs = Vec::new();
    let mut instances = Vec::new();
    for i in 0..12 {
        let gold = if i % 4 < 2 { Label::Supported } else { Label::Refuted };
        let (q, drug, cond) = question(100 + i);
        let old: [i32; 3] = if i % 2 == 0 { [1985, 1992, 2004] } else { [1988, 2002, 2006] };
        let base = 10_000 + i * 10;
        let mut next = 0;
        let mut push = |text: String, year: i32| {
            next += 1;
            docs.push(doc(&(base + next).to_string(), &format!("{drug} study {year}"), &text, Some(year)));
        };
        for year in [2021, 2023, 2015] {
            push(agreeing(gold, &drug, &cond), year);
        }
        for year in old.into_iter().chain([2012]) {
            push(contradicting(gold, &drug, &cond), year);
        }
        instances.push(healthqa::eval::QAInstance {
            id: format!("y{i:02}"),
            question: q,
            gold,
        });
    }
    Synthetic {
        docs,
        dataset: QADataset {
            name: "synthetic-year".into(),
            scheme: VoteScheme::Binary,
            instances,
        },
        authoritative: BTreeMap::new(),
    }
}

/// Distinct labels, for sanity checks on generated data.
pub fn label_set(labels: &[Label]) -> HashSet<Label> {
    labels.iter().copied().collect()
}
