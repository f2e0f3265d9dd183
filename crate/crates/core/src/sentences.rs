//! Sentence-level evidence selection: split pooled abstracts into sentences
//! and keep the `j` most similar to the question.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::tokenize;

const ABBREVIATIONS: &[&str] = &["vs.", "approx.", "e.g.", "i.e.", "fig.", "dr.", "no."];

/// Rule-based splitter for abstracts.
///
/// Breaks after `.`, `!` or `?` when followed by whitespace and then an
/// uppercase letter or digit. Never breaks inside parentheses or brackets, or
/// after a known abbreviation.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        match c {
            '(' | '[' => depth += 1,
            ')' | ']' => depth = depth.saturating_sub(1),
            '.' | '!' | '?' if depth == 0 => {
                let mut next = i + 1;
                while next < chars.len() && chars[next].1.is_whitespace() {
                    next += 1;
                }
                let boundary = next > i + 1
                    && next < chars.len()
                    && (chars[next].1.is_uppercase() || chars[next].1.is_numeric());
                let end = pos + c.len_utf8();
                if boundary && !(c == '.' && ends_with_abbreviation(&text[start..end])) {
                    push_trimmed(&mut out, &text[start..end]);
                    start = chars[next].0;
                    i = next;
                    continue;
                }
            }
            _ => {}
        }
        i += 1;
    }
    push_trimmed(&mut out, &text[start..]);
    out
}

fn push_trimmed(out: &mut Vec<String>, s: &str) {
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

fn ends_with_abbreviation(segment: &str) -> bool {
    let mut words = segment.split_whitespace().rev();
    let Some(last) = words.next() else {
        return false;
    };
    let last = last.trim_start_matches(['(', '[']).to_lowercase();
    if last == "al." {
        return words.next().is_some_and(|w| w.eq_ignore_ascii_case("et"));
    }
    ABBREVIATIONS.contains(&last.as_str())
}

/// Produces fixed-dimension vectors for texts.
///
/// Implementations must be deterministic per instance and independent of how
/// texts are batched.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Cosine similarity clamped to [-1, 1]; 0 when either vector is all zeros.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// TF-IDF vectors (`1 + ln tf` times smoothed idf) over a vocabulary fitted to
/// a fixed set of texts, typically the question plus its sentence pool.
#[derive(Debug, Clone)]
pub struct TfIdfEmbedder {
    vocab: BTreeMap<String, usize>,
    idf: Vec<f64>,
}

impl TfIdfEmbedder {
    pub fn fit<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            let mut terms = tokenize(text.as_ref());
            terms.sort_unstable();
            terms.dedup();
            for t in terms {
                *df.entry(t).or_default() += 1;
            }
        }
        let n = texts.len() as f64;
        let mut vocab = BTreeMap::new();
        let mut idf = Vec::with_capacity(df.len());
        for (i, (term, count)) in df.into_iter().enumerate() {
            idf.push(((1.0 + n) / (1.0 + count as f64)).ln() + 1.0);
            vocab.insert(term, i);
        }
        Self { vocab, idf }
    }

    pub fn dim(&self) -> usize {
        self.idf.len()
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut counts: HashMap<usize, u32> = HashMap::new();
        for t in tokenize(text) {
            if let Some(&i) = self.vocab.get(&t) {
                *counts.entry(i).or_default() += 1;
            }
        }
        let mut v = vec![0.0; self.dim()];
        for (i, tf) in counts {
            v[i] = (1.0 + (tf as f64).ln()) * self.idf[i];
        }
        v
    }
}

impl EmbeddingProvider for TfIdfEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSentence {
    pub text: String,
    pub source_pmid: String,
    /// 1-based rank of the source document in the retrieval list.
    pub doc_rank: usize,
    /// 0-based position within the source abstract.
    pub sent_index: usize,
    pub similarity: f64,
}

/// A retrieved abstract contributing sentences to the pool.
#[derive(Debug, Clone, Copy)]
pub struct PooledDocument<'a> {
    pub pmid: &'a str,
    pub rank: usize,
    pub abstract_text: &'a str,
}

/// Every sentence of every document, with similarity still unset.
pub fn pool_sentences(docs: &[PooledDocument<'_>]) -> Vec<EvidenceSentence> {
    docs.iter()
        .flat_map(|d| {
            split_sentences(d.abstract_text)
                .into_iter()
                .enumerate()
                .map(move |(i, text)| EvidenceSentence {
                    text,
                    source_pmid: d.pmid.to_string(),
                    doc_rank: d.rank,
                    sent_index: i,
                    similarity: 0.0,
                })
        })
        .collect()
}

/// Ranks `pool` against `question` and keeps the best `j`, ordered by
/// descending similarity, then document rank, then sentence position.
pub fn rank_sentences(
    question: &str,
    mut pool: Vec<EvidenceSentence>,
    j: usize,
    provider: &dyn EmbeddingProvider,
    batch_size: usize,
) -> Result<Vec<EvidenceSentence>> {
    if pool.is_empty() || j == 0 {
        return Ok(Vec::new());
    }
    let query = provider
        .embed(&[question.to_string()])?
        .pop()
        .ok_or_else(|| Error::Service("embedding provider returned no vector".into()))?;
    let texts: Vec<String> = pool.iter().map(|s| s.text.clone()).collect();
    let mut vectors = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(batch_size.max(1)) {
        let batch = provider.embed(chunk)?;
        if batch.len() != chunk.len() {
            return Err(Error::Service(format!(
                "embedding provider returned {} vectors for {} texts",
                batch.len(),
                chunk.len()
            )));
        }
        vectors.extend(batch);
    }
    for (sentence, v) in pool.iter_mut().zip(&vectors) {
        if v.len() != query.len() {
            return Err(Error::Service(format!(
                "embedding dimension mismatch: {} vs {}",
                v.len(),
                query.len()
            )));
        }
        sentence.similarity = cosine(&query, v);
    }
    pool.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then(a.doc_rank.cmp(&b.doc_rank))
            .then(a.sent_index.cmp(&b.sent_index))
    });
    pool.truncate(j);
    Ok(pool)
}

pub fn select_top_j(
    question: &str,
    docs: &[PooledDocument<'_>],
    j: usize,
    provider: &dyn EmbeddingProvider,
    batch_size: usize,
) -> Result<Vec<EvidenceSentence>> {
    rank_sentences(question, pool_sentences(docs), j, provider, batch_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_on_terminators() {
        assert_eq!(split_sentences("It works. It is safe."), ["It works.", "It is safe."]);
        assert_eq!(split_sentences("Really? Yes! 5 trials agreed."), ["Really?", "Yes!", "5 trials agreed."]);
    }

    #[test]
    fn abbreviations_do_not_split() {
        assert_eq!(
            split_sentences("Approx. 5 mg was given vs. placebo."),
            ["Approx. 5 mg was given vs. placebo."]
        );
        assert_eq!(
            split_sentences("As shown by Smith et al. The effect held. See Fig. 2 for details."),
            ["As shown by Smith et al. The effect held.", "See Fig. 2 for details."]
        );
    }

    #[test]
    fn no_split_inside_parentheses_or_before_lowercase() {
        assert_eq!(
            split_sentences("Dose was low (see text. It was 5 mg). Next sentence."),
            ["Dose was low (see text. It was 5 mg).", "Next sentence."]
        );
        assert_eq!(split_sentences("p < 0.05. in all arms."), ["p < 0.05. in all arms."]);
        assert_eq!(split_sentences("Values were 2.5 and 3.1 mg."), ["Values were 2.5 and 3.1 mg."]);
    }

    #[test]
    fn empty_and_whitespace() {
        assert!(split_sentences("").is_empty());
        assert!(split_sentences("   \n ").is_empty());
        assert_eq!(split_sentences("  No terminator  "), ["No terminator"]);
    }

    #[test]
    fn cosine_bounds() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-12);
        assert!((cosine(&[1.0, 0.0], &[-1.0, 0.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_sentence_ranks_first() {
        let question = "Does vitamin D prevent fractures?";
        let abstracts = [
            "Calcium intake was measured. Does vitamin D prevent fractures? We studied it.",
            "Vitamin D levels varied by season.",
        ];
        let docs: Vec<_> = abstracts
            .iter()
            .enumerate()
            .map(|(i, a)| PooledDocument {
                pmid: if i == 0 { "10" } else { "11" },
                rank: i + 1,
                abstract_text: a,
            })
            .collect();
        let pool = pool_sentences(&docs);
        let mut texts = vec![question.to_string()];
        texts.extend(pool.iter().map(|s| s.text.clone()));
        let provider = TfIdfEmbedder::fit(&texts);
        let top = select_top_j(question, &docs, 20, &provider, 64).unwrap();
        assert_eq!(top.len(), 4);
        assert_eq!(top[0].text, question);
        assert!((top[0].similarity - 1.0).abs() < 1e-12);
        assert_eq!((top[0].source_pmid.as_str(), top[0].sent_index), ("10", 1));
    }

    #[test]
    fn batching_does_not_change_ranking() {
        let question = "statin muscle pain";
        let abs = "Statins cause muscle pain. Muscle pain is rare. Statin use rose. Pain scores fell. Nothing else.";
        let docs = [PooledDocument { pmid: "1", rank: 1, abstract_text: abs }];
        let mut texts = vec![question.to_string()];
        texts.extend(split_sentences(abs));
        let provider = TfIdfEmbedder::fit(&texts);
        let one = select_top_j(question, &docs, 3, &provider, 1).unwrap();
        let many = select_top_j(question, &docs, 3, &provider, 64).unwrap();
        assert_eq!(one, many);
    }
}
