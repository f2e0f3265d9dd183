mod common;

use std::sync::Mutex;

use common::{bm25_brute_force, doc, Fixture};
use healthqa::pipeline::{Embedder, Pipeline, ReaderOptions};
use healthqa::reader::{
    label_of, label_with_threshold, majority_vote, EntailmentScore, EntailmentScorer, EvidenceMode, Label,
    OverlapScorer, RetrievalConfig, VoteScheme,
};
use healthqa::sentences::EmbeddingProvider;
use healthqa::tokenize::tokenize;
use healthqa::{Error, Result};
use proptest::prelude::*;

use Label::{NotEnoughInfo as N, Refuted as R, Supported as S};

/// Scores evidence by looking up a marker word in the premise.
struct Stub {
    table: Vec<(&'static str, EntailmentScore)>,
    seen: Mutex<Vec<(String, String)>>,
}

impl Stub {
    fn new(table: Vec<(&'static str, (f64, f64, f64))>) -> Self {
        Self {
            table: table
                .into_iter()
                .map(|(k, (r, s, n))| (k, EntailmentScore::new(r, s, n).unwrap()))
                .collect(),
            seen: Mutex::new(Vec::new()),
        }
    }
}

impl EntailmentScorer for Stub {
    fn score(&self, premise: &str, hypothesis: &str) -> Result<EntailmentScore> {
        self.seen.lock().unwrap().push((premise.into(), hypothesis.into()));
        self.table
            .iter()
            .find(|(k, _)| premise.contains(k))
            .map(|(_, s)| *s)
            .ok_or_else(|| Error::Service(format!("no stub score for {premise:?}")))
    }
}

fn pipeline_with(fx: &Fixture, scorer: impl EntailmentScorer + 'static) -> Pipeline {
    Pipeline::new(fx.index(), fx.store(), Box::new(scorer), Embedder::TfIdf)
}

fn score(r: f64, s: f64, n: f64) -> EntailmentScore {
    EntailmentScore::new(r, s, n).unwrap()
}

#[test]
fn argmax_with_declared_tie_order() {
    assert_eq!(label_of(&score(0.1, 0.8, 0.1)), S);
    assert_eq!(label_of(&score(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)), N);
    assert_eq!(label_of(&score(0.5, 0.5, 0.0)), R);
    assert_eq!(label_with_threshold(&score(0.1, 0.6, 0.3), Some(0.7)), N);
    assert_eq!(label_with_threshold(&score(0.1, 0.6, 0.3), None), S);
    assert!(EntailmentScore::new(0.5, 0.6, 0.0).is_err());
}

#[test]
fn vote_examples() {
    assert_eq!(majority_vote(&[S, R], VoteScheme::Binary), R);
    assert_eq!(majority_vote(&[N, N, S], VoteScheme::Binary), S);
    assert_eq!(majority_vote(&[N, N, S], VoteScheme::Ternary), N);
    assert_eq!(majority_vote(&[], VoteScheme::Binary), R);
    assert_eq!(majority_vote(&[], VoteScheme::Ternary), N);
    assert_eq!(majority_vote(&[N, N], VoteScheme::Binary), R);
    assert_eq!(majority_vote(&[R, S], VoteScheme::Ternary), R);
    assert_eq!(majority_vote(&[N, R], VoteScheme::Ternary), N);
}

#[test]
fn overlap_scorer_behaviour() {
    let s = OverlapScorer::default();
    let q = "Does aspirin relieve headache?";
    assert_eq!(label_of(&s.score("Aspirin was shown to relieve headache.", q).unwrap()), S);
    assert_eq!(label_of(&s.score("Aspirin did not relieve headache.", q).unwrap()), R);
    assert_eq!(label_of(&s.score("Ibuprofen trial in children.", q).unwrap()), N);
    let x = s.score("Aspirin was ineffective for headache", q).unwrap();
    assert_eq!(label_of(&x), R);
    assert!((x.refuted + x.supported + x.nei - 1.0).abs() < 1e-6);
}

#[test]
fn single_document_chain() {
    let fx = Fixture::new(&[doc("1", "Aspirin", "aspirin helps with headache marker", Some(2020))]);
    let p = pipeline_with(&fx, Stub::new(vec![("marker", (0.05, 0.9, 0.05))]));
    let config = RetrievalConfig { top_k: 1, ..Default::default() };
    let a = p.answer("q1", "Does aspirin help headache?", &config).unwrap();
    assert_eq!(a.verdict, S);
    assert_eq!(a.evidence.len(), 1);
    assert_eq!(a.evidence[0].label, S);
}

#[test]
fn three_documents_vote_supported() {
    let fx = Fixture::new(&[
        doc("1", "", "aspirin aspirin headache alpha", None),
        doc("2", "", "aspirin headache beta", None),
        doc("3", "", "aspirin headache gamma trial", None),
    ]);
    let p = pipeline_with(
        &fx,
        Stub::new(vec![("alpha", (0.1, 0.8, 0.1)), ("beta", (0.2, 0.7, 0.1)), ("gamma", (0.8, 0.1, 0.1))]),
    );
    let config = RetrievalConfig { top_k: 3, ..Default::default() };
    let a = p.answer("q", "aspirin headache", &config).unwrap();
    let labels: Vec<Label> = a.evidence.iter().map(|e| e.label).collect();
    assert_eq!(labels, [S, S, R]);
    assert_eq!(a.verdict, S);
    assert_eq!((a.vote_counts.supported, a.vote_counts.refuted), (2, 1));
}

const GINKGO_Q: &str = "Does ginkgo improve memory in the elderly?";

fn ginkgo_docs() -> Vec<healthqa::corpus::Document> {
    let mut docs = vec![
        doc("11", "Ginkgo memory", "ginkgo ginkgo memory memory ginkgo", Some(2019)),
        doc(
            "12",
            "Ginkgo trial",
            "In a randomised trial run across several sites over two years of follow up with repeated \
             cognitive assessment ginkgo was found to improve memory in the elderly participants",
            Some(2021),
        ),
        doc(
            "13",
            "Ginkgo extract",
            "Daily ginkgo extract taken with meals for a full year can improve memory scores in the \
             elderly according to this large multicentre randomised study with blinded assessors",
            Some(2022),
        ),
    ];
    // Background abstracts make "improve" and "elderly" common terms.
    for (i, topic) in ["sleep", "balance", "mood", "appetite", "hearing", "vision"].iter().enumerate() {
        docs.push(doc(&(20 + i).to_string(), topic, &format!("Exercise may improve {topic} in the elderly"), Some(2015)));
    }
    docs
}

#[test]
fn ternary_verdict_changes_with_k() {
    let docs = ginkgo_docs();
    // Brute force confirms the retrieval order the votes below rely on.
    let tokens: Vec<(String, Vec<String>)> = docs
        .iter()
        .map(|d| (d.pmid.clone(), tokenize(&format!("{} {}", d.title, d.abstract_text))))
        .collect();
    let order: Vec<String> = bm25_brute_force(&tokens, &tokenize(GINKGO_Q), 1.2, 0.75)
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    assert_eq!(&order[..3], ["11", "12", "13"]);

    let fx = Fixture::new(&docs);
    let p = fx.pipeline();
    let mut config = RetrievalConfig {
        top_k: 3,
        vote_scheme: VoteScheme::Ternary,
        ..Default::default()
    };
    let a3 = p.answer("g", GINKGO_Q, &config).unwrap();
    assert_eq!(a3.evidence.iter().map(|e| e.label).collect::<Vec<_>>(), [N, S, S]);
    assert_eq!(a3.verdict, S);
    config.top_k = 1;
    let a1 = p.answer("g", GINKGO_Q, &config).unwrap();
    assert_eq!(a1.verdict, N);
}

#[test]
fn empty_retrieval_defaults() {
    let fx = Fixture::new(&[doc("1", "", "statins lower cholesterol", None)]);
    let p = fx.pipeline();
    let mut config = RetrievalConfig::default();
    let a = p.answer("q", "ginkgo memory", &config).unwrap();
    assert!(a.evidence.is_empty());
    assert!(a.defaulted);
    assert_eq!(a.verdict, R);
    config.vote_scheme = VoteScheme::Ternary;
    assert_eq!(p.answer("q", "ginkgo memory", &config).unwrap().verdict, N);
}

#[test]
fn premise_is_evidence_and_hypothesis_is_question() {
    let fx = Fixture::new(&[doc("1", "Title", "aspirin marker text", None)]);
    let stub = std::sync::Arc::new(Stub::new(vec![("marker", (0.2, 0.6, 0.2))]));
    struct Shared(std::sync::Arc<Stub>);
    impl EntailmentScorer for Shared {
        fn score(&self, p: &str, h: &str) -> Result<EntailmentScore> {
            self.0.score(p, h)
        }
    }
    let p = pipeline_with(&fx, Shared(stub.clone()));
    p.answer("q", "Is aspirin  useful?", &RetrievalConfig::default()).unwrap();
    let seen = stub.seen.lock().unwrap();
    assert_eq!(seen.as_slice(), [("Title aspirin marker text".to_string(), "Is aspirin  useful?".to_string())]);
}

#[test]
fn scorer_errors_carry_the_question_id() {
    let fx = Fixture::new(&[doc("1", "", "aspirin", None)]);
    let p = pipeline_with(&fx, Stub::new(vec![]));
    let err = p.answer("q-42", "aspirin", &RetrievalConfig::default()).unwrap_err();
    assert!(matches!(&err, Error::Question { question_id, .. } if question_id == "q-42"), "{err}");
}

#[test]
fn sentence_mode_uses_pool_and_top_j() {
    let fx = Fixture::new(&ginkgo_docs());
    let p = fx.pipeline();
    let config = RetrievalConfig {
        mode: EvidenceMode::Sentence,
        top_j: 2,
        pool_size: 3,
        ..Default::default()
    };
    let a = p.answer("s", GINKGO_Q, &config).unwrap();
    assert_eq!(a.evidence.len(), 2);
    for e in &a.evidence {
        assert!(["11", "12", "13"].contains(&e.pmid.as_str()));
        assert!(e.sent_index.is_some());
    }
    assert!(a.evidence[0].retrieval_score >= a.evidence[1].retrieval_score);
}

#[test]
fn embedding_failures_carry_the_question_id() {
    struct Broken;
    impl EmbeddingProvider for Broken {
        fn embed(&self, _: &[String]) -> Result<Vec<Vec<f64>>> {
            Err(Error::Service("connection refused".into()))
        }
    }
    let fx = Fixture::new(&ginkgo_docs());
    let p = Pipeline::new(fx.index(), fx.store(), Box::new(OverlapScorer::default()), Embedder::Provider(Box::new(Broken)));
    let config = RetrievalConfig { mode: EvidenceMode::Sentence, ..Default::default() };
    let err = p.answer("s-1", GINKGO_Q, &config).unwrap_err();
    assert!(err.to_string().contains("s-1") && err.to_string().contains("connection refused"), "{err}");
}

#[test]
fn answers_are_reproducible() {
    let fx = Fixture::new(&ginkgo_docs());
    let config = RetrievalConfig { top_k: 5, ..Default::default() };
    let a = serde_json::to_string(&fx.pipeline().answer("g", GINKGO_Q, &config).unwrap()).unwrap();
    let b = serde_json::to_string(&fx.pipeline().answer("g", GINKGO_Q, &config).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn evidence_is_truncated_to_the_word_budget() {
    let long: String = (0..50).map(|i| format!("w{i} ")).collect();
    let fx = Fixture::new(&[doc("1", "aspirin", &long, None)]);
    let p = fx.pipeline().with_reader_options(ReaderOptions { min_confidence: None, max_evidence_tokens: 10 });
    let a = p.answer("q", "aspirin", &RetrievalConfig::default()).unwrap();
    assert_eq!(a.evidence[0].text.split_whitespace().count(), 10);
}

#[test]
fn fingerprint_tracks_every_field() {
    let base = RetrievalConfig::default();
    let variants = [
        RetrievalConfig { top_k: 6, ..base },
        RetrievalConfig { top_j: 6, ..base },
        RetrievalConfig { pool_size: 21, ..base },
        RetrievalConfig { mode: EvidenceMode::Sentence, ..base },
        RetrievalConfig { vote_scheme: VoteScheme::Ternary, ..base },
        RetrievalConfig { filter_placement: healthqa::filter::FilterPlacement::PreRetrieval, ..base },
        RetrievalConfig { filter: healthqa::filter::FilterSpec { min_year: Some(2000), min_citations: None }, ..base },
    ];
    let mut prints: Vec<String> = variants.iter().map(|c| c.fingerprint()).collect();
    prints.push(base.fingerprint());
    assert_eq!(base.fingerprint(), RetrievalConfig::default().fingerprint());
    prints.sort();
    prints.dedup();
    assert_eq!(prints.len(), variants.len() + 1);
}

fn labels() -> impl Strategy<Value = Vec<Label>> {
    prop::collection::vec(prop_oneof![Just(R), Just(S), Just(N)], 0..25)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn vote_is_permutation_invariant(mut l in labels(), seed in any::<u64>()) {
        let before = (majority_vote(&l, VoteScheme::Binary), majority_vote(&l, VoteScheme::Ternary));
        // Deterministic shuffle from the seed.
        let mut state = seed | 1;
        for i in (1..l.len()).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            l.swap(i, (state % (i as u64 + 1)) as usize);
        }
        prop_assert_eq!(before, (majority_vote(&l, VoteScheme::Binary), majority_vote(&l, VoteScheme::Ternary)));
    }

    #[test]
    fn binary_never_nei(l in labels()) {
        prop_assert_ne!(majority_vote(&l, VoteScheme::Binary), N);
    }

    #[test]
    fn unanimity(n in 1..20usize, which in 0..3u8) {
        let label = Label::from_code(which).unwrap();
        let l = vec![label; n];
        prop_assert_eq!(majority_vote(&l, VoteScheme::Ternary), label);
        if label != N {
            prop_assert_eq!(majority_vote(&l, VoteScheme::Binary), label);
        }
    }

    #[test]
    fn vote_matches_counting_oracle(l in labels()) {
        let count = |x: Label| l.iter().filter(|y| **y == x).count();
        let (r, s, n) = (count(R), count(S), count(N));
        let binary = if s > r { S } else { R };
        let ternary = if l.is_empty() || (n >= r && n >= s) {
            N
        } else if r >= s {
            R
        } else {
            S
        };
        prop_assert_eq!(majority_vote(&l, VoteScheme::Binary), binary);
        prop_assert_eq!(majority_vote(&l, VoteScheme::Ternary), ternary);
    }

    #[test]
    fn label_of_is_scale_invariant(r in 0.0..1.0f64, s in 0.0..1.0f64, n in 0.0..1.0f64, c in 0.01..100.0f64) {
        prop_assume!(r + s + n > 1e-6);
        let a = EntailmentScore::normalized(r, s, n).unwrap();
        let b = EntailmentScore::normalized(r * c, s * c, n * c).unwrap();
        // Exact ties may be perturbed by rounding; only compare clear winners.
        let top = [a.refuted, a.supported, a.nei];
        let mut sorted = top;
        sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
        prop_assume!(sorted[0] - sorted[1] > 1e-9);
        prop_assert_eq!(label_of(&a), label_of(&b));
    }
}
