//! The reader: per-evidence entailment labels and majority voting.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filter::{FilterPlacement, FilterSpec};
use crate::tokenize::{is_stopword, tokenize};

/// Verdict classes, with their dataset codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Refuted = 0,
    Supported = 1,
    #[serde(rename = "nei")]
    NotEnoughInfo = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Refuted, Label::Supported, Label::NotEnoughInfo];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Refuted => "refuted",
            Label::Supported => "supported",
            Label::NotEnoughInfo => "nei",
        }
    }

    /// Tie-break preference: NEI first, then Refuted, then Supported.
    fn caution(self) -> u8 {
        match self {
            Label::NotEnoughInfo => 2,
            Label::Refuted => 1,
            Label::Supported => 0,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "refuted" => Ok(Label::Refuted),
            "supported" => Ok(Label::Supported),
            "nei" => Ok(Label::NotEnoughInfo),
            other => Err(format!("unknown label {other:?} (expected supported|refuted|nei)")),
        }
    }
}

/// Three-way entailment probabilities. Always sums to 1 within 1e-6.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntailmentScore {
    pub refuted: f64,
    pub supported: f64,
    pub nei: f64,
}

impl EntailmentScore {
    pub const TOLERANCE: f64 = 1e-6;

    pub fn new(refuted: f64, supported: f64, nei: f64) -> Result<Self> {
        let score = Self { refuted, supported, nei };
        let parts = [refuted, supported, nei];
        if parts.iter().any(|p| !p.is_finite() || *p < -Self::TOLERANCE || *p > 1.0 + Self::TOLERANCE) {
            return Err(Error::Validation(format!("probabilities out of range: {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::Validation(format!("probabilities do not sum to 1: {parts:?}")));
        }
        Ok(score)
    }

    /// Rescales non-negative weights to sum to 1.
    pub fn normalized(refuted: f64, supported: f64, nei: f64) -> Result<Self> {
        let total = refuted + supported + nei;
        if total.is_nan() || total <= 0.0 || refuted < 0.0 || supported < 0.0 || nei < 0.0 {
            return Err(Error::Validation(format!(
                "cannot normalize weights ({refuted}, {supported}, {nei})"
            )));
        }
        Self::new(refuted / total, supported / total, nei / total)
    }

    pub fn get(&self, label: Label) -> f64 {
        match label {
            Label::Refuted => self.refuted,
            Label::Supported => self.supported,
            Label::NotEnoughInfo => self.nei,
        }
    }
}

/// Argmax over the three probabilities; exact ties go to the more cautious
/// label (NEI, then Refuted, then Supported).
pub fn label_of(score: &EntailmentScore) -> Label {
    let mut best = Label::NotEnoughInfo;
    for label in [Label::Refuted, Label::Supported] {
        let (p, q) = (score.get(label), score.get(best));
        if p > q || (p == q && label.caution() > best.caution()) {
            best = label;
        }
    }
    best
}

/// [`label_of`], but evidence whose top probability is below `min_confidence`
/// votes NEI.
pub fn label_with_threshold(score: &EntailmentScore, min_confidence: Option<f64>) -> Label {
    let label = label_of(score);
    match min_confidence {
        Some(min) if score.get(label) < min => Label::NotEnoughInfo,
        _ => label,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteScheme {
    /// NEI votes are discarded; ties and empty votes go to Refuted.
    #[default]
    Binary,
    /// Plurality over all three labels; ties go NEI > Refuted > Supported.
    Ternary,
}

impl std::str::FromStr for VoteScheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "binary" => Ok(VoteScheme::Binary),
            "ternary" => Ok(VoteScheme::Ternary),
            other => Err(format!("unknown vote scheme {other:?} (expected binary|ternary)")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteCounts {
    pub refuted: usize,
    pub supported: usize,
    pub nei: usize,
}

impl VoteCounts {
    pub fn from_labels(labels: &[Label]) -> Self {
        let mut counts = Self::default();
        for label in labels {
            match label {
                Label::Refuted => counts.refuted += 1,
                Label::Supported => counts.supported += 1,
                Label::NotEnoughInfo => counts.nei += 1,
            }
        }
        counts
    }

    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::Refuted => self.refuted,
            Label::Supported => self.supported,
            Label::NotEnoughInfo => self.nei,
        }
    }

    /// Votes that count under `scheme`.
    pub fn effective(&self, scheme: VoteScheme) -> usize {
        match scheme {
            VoteScheme::Binary => self.refuted + self.supported,
            VoteScheme::Ternary => self.refuted + self.supported + self.nei,
        }
    }

    pub fn verdict(&self, scheme: VoteScheme) -> Label {
        match scheme {
            VoteScheme::Binary => {
                if self.supported > self.refuted {
                    Label::Supported
                } else {
                    Label::Refuted
                }
            }
            VoteScheme::Ternary => {
                let mut best = Label::Supported;
                for label in [Label::Refuted, Label::NotEnoughInfo] {
                    let (c, b) = (self.get(label), self.get(best));
                    if c > b || (c == b && label.caution() > best.caution()) {
                        best = label;
                    }
                }
                best
            }
        }
    }
}

pub fn majority_vote(labels: &[Label], scheme: VoteScheme) -> Label {
    VoteCounts::from_labels(labels).verdict(scheme)
}

/// Scores whether `premise` (evidence) entails `hypothesis` (question).
pub trait EntailmentScorer: Send + Sync {
    fn score(&self, premise: &str, hypothesis: &str) -> Result<EntailmentScore>;

    fn score_batch(&self, pairs: &[(String, String)]) -> Result<Vec<EntailmentScore>> {
        pairs.iter().map(|(p, h)| self.score(p, h)).collect()
    }
}

pub const NEGATION_CUES: &[&str] = &["lack", "no", "not", "ineffective", "without"];

/// Deterministic token-overlap stand-in for an NLI model. Used offline and as
/// a test oracle; it has no claim to NLI quality.
///
/// Let `o` be the fraction of the question's content tokens that occur in the
/// evidence. If a negation cue sits within `window` tokens of a question
/// keyword in the evidence, `o` goes to Refuted, otherwise to Supported; the
/// remaining `1 - o` goes to NEI.
#[derive(Debug, Clone, Copy)]
pub struct OverlapScorer {
    pub window: usize,
}

impl Default for OverlapScorer {
    fn default() -> Self {
        Self { window: 3 }
    }
}

impl OverlapScorer {
    fn keywords(question: &str) -> Vec<String> {
        let mut keys: Vec<String> = tokenize(question)
            .into_iter()
            .filter(|t| !is_stopword(t) && !NEGATION_CUES.contains(&t.as_str()))
            .collect();
        keys.sort_unstable();
        keys.dedup();
        keys
    }

    pub fn negated(&self, evidence_tokens: &[String], keywords: &[String]) -> bool {
        let is_key = |t: &String| keywords.binary_search(t).is_ok();
        evidence_tokens.iter().enumerate().any(|(i, t)| {
            NEGATION_CUES.contains(&t.as_str()) && {
                let lo = i.saturating_sub(self.window);
                let hi = (i + self.window).min(evidence_tokens.len() - 1);
                (lo..=hi).any(|j| j != i && is_key(&evidence_tokens[j]))
            }
        })
    }
}

impl EntailmentScorer for OverlapScorer {
    fn score(&self, premise: &str, hypothesis: &str) -> Result<EntailmentScore> {
        let keywords = Self::keywords(hypothesis);
        let evidence = tokenize(premise);
        if keywords.is_empty() {
            return EntailmentScore::new(0.0, 0.0, 1.0);
        }
        let mut present: Vec<&String> = evidence.iter().filter(|t| keywords.binary_search(t).is_ok()).collect();
        present.sort_unstable();
        present.dedup();
        let overlap = present.len() as f64 / keywords.len() as f64;
        if self.negated(&evidence, &keywords) {
            EntailmentScore::normalized(overlap, 0.0, 1.0 - overlap)
        } else {
            EntailmentScore::normalized(0.0, overlap, 1.0 - overlap)
        }
    }
}

/// Evidence granularity handed to the reader.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvidenceMode {
    #[default]
    Document,
    Sentence,
}

impl std::str::FromStr for EvidenceMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "document" => Ok(EvidenceMode::Document),
            "sentence" => Ok(EvidenceMode::Sentence),
            other => Err(format!("unknown mode {other:?} (expected document|sentence)")),
        }
    }
}

/// Everything that changes which evidence is retrieved and how it is voted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    pub mode: EvidenceMode,
    pub top_k: usize,
    pub top_j: usize,
    pub pool_size: usize,
    pub filter: FilterSpec,
    pub filter_placement: FilterPlacement,
    pub vote_scheme: VoteScheme,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            mode: EvidenceMode::Document,
            top_k: 5,
            top_j: 5,
            pool_size: 20,
            filter: FilterSpec::default(),
            filter_placement: FilterPlacement::PostRetrieval,
            vote_scheme: VoteScheme::Binary,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("top_k", self.top_k), ("top_j", self.top_j), ("pool_size", self.pool_size)] {
            if v == 0 {
                return Err(Error::Config(format!("retrieval.{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Canonical JSON: field order is fixed by the struct definition.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("RetrievalConfig serializes")
    }

    /// Lowercase hex SHA-256 of [`Self::canonical_json`].
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub text: String,
    pub pmid: String,
    pub doc_rank: usize,
    /// Set in sentence mode.
    pub sent_index: Option<usize>,
    /// BM25 score in document mode, cosine similarity in sentence mode.
    pub retrieval_score: f64,
    pub entailment: EntailmentScore,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question_id: String,
    pub question: String,
    pub evidence: Vec<EvidenceItem>,
    pub verdict: Label,
    pub vote_counts: VoteCounts,
    /// True when no vote counted under the scheme and the verdict is the
    /// scheme's default (Refuted for binary, NEI for ternary).
    pub defaulted: bool,
    pub config_fingerprint: String,
}
