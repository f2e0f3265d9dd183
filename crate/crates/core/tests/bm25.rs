mod common;

use common::{bm25_brute_force, doc};
use healthqa::index::{Bm25Params, Index, IndexFields, IndexOptions};
use proptest::prelude::*;

fn abstract_only() -> IndexOptions {
    IndexOptions {
        fields: IndexFields::Abstract,
        ..Default::default()
    }
}

fn worked_example() -> Index {
    Index::from_documents(
        [
            doc("1", "", "aspirin relieves headache pain quickly", None),
            doc("2", "", "placebo effect in trials", None),
            doc("3", "", "aspirin dosage study", None),
        ],
        abstract_only(),
    )
}

#[test]
fn worked_example_scores() {
    // Direct evaluation: N=3, avgdl=4, idf(aspirin)=ln 1.6, idf(headache)=ln(8/3).
    let k1 = 1.2;
    let b = 0.75;
    let w = |idf: f64, dl: f64| idf * (k1 + 1.0) / (1.0 + k1 * (1.0 - b + b * dl / 4.0));
    let d1 = w(1.6f64.ln(), 5.0) + w((8.0f64 / 3.0).ln(), 5.0);
    let d3 = w(1.6f64.ln(), 3.0);
    assert!((d1 - 1.316).abs() < 1e-3, "{d1}");
    assert!((d3 - 0.524).abs() < 1e-3, "{d3}");

    let index = worked_example();
    let q = ["aspirin".to_string(), "headache".to_string()];
    assert!((index.score(&q, "1").unwrap() - d1).abs() < 1e-12);
    assert!((index.score(&q, "3").unwrap() - d3).abs() < 1e-12);
    assert_eq!(index.score(&q, "2").unwrap(), 0.0);
    assert!(index.score(&q, "4").is_err());

    let hits = index.search("aspirin headache", 2, None);
    let pmids: Vec<&str> = hits.iter().map(|h| h.pmid.as_str()).collect();
    assert_eq!(pmids, ["1", "3"]);
    assert_eq!(index.search("aspirin headache", 10, None).len(), 2);
    assert!(index.search("ibuprofen", 10, None).is_empty());
}

#[test]
fn stats_count_title_tokens() {
    let index = Index::from_documents([doc("1", "Aspirin trial", "aspirin aspirin", None)], IndexOptions::default());
    assert_eq!(index.df("aspirin"), 1);
    assert_eq!(index.tf("aspirin", "1"), Some(3));
    assert_eq!(index.doc_len("1"), Some(4));
    assert_eq!(index.avg_doc_len(), 4.0);

    let two = Index::from_documents(
        [doc("1", "", "t u", None), doc("2", "", "t v", None)],
        IndexOptions::default(),
    );
    assert_eq!(two.df("t"), 2);
}

#[test]
fn empty_corpus() {
    let index = Index::from_documents(Vec::new(), IndexOptions::default());
    assert_eq!(index.doc_count(), 0);
    assert_eq!(index.avg_doc_len(), 0.0);
    assert!(index.search("anything", 5, None).is_empty());
    let reopened = Index::from_bytes(&index.to_bytes()).unwrap();
    assert_eq!(reopened.doc_count(), 0);
}

#[test]
fn file_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.bin");
    let index = worked_example();
    index.write_to(&path).unwrap();
    let reopened = Index::open(&path).unwrap();
    assert_eq!(reopened.stats(), index.stats());
    assert_eq!(reopened.options(), index.options());
    assert_eq!(reopened.search("aspirin headache", 3, None), index.search("aspirin headache", 3, None));
    assert_eq!(reopened.to_bytes(), index.to_bytes());

    let mut bytes = index.to_bytes();
    bytes[0] = b'X';
    assert!(Index::from_bytes(&bytes).is_err());
    let bytes = index.to_bytes();
    assert!(Index::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn index_layout_is_little_endian_with_json_header() {
    let bytes = worked_example().to_bytes();
    assert_eq!(&bytes[..6], b"EQIDX1");
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[10..10 + header_len]).unwrap();
    assert_eq!(header["format_version"], 1);
    assert_eq!(header["doc_count"], 3);
    assert_eq!(header["total_len"], 12);
}

#[test]
fn ties_break_by_numeric_pmid() {
    let index = Index::from_documents(
        [
            doc("100", "", "aspirin", None),
            doc("20", "", "aspirin", None),
            doc("3", "", "aspirin", None),
        ],
        abstract_only(),
    );
    let pmids: Vec<String> = index.search("aspirin", 3, None).into_iter().map(|h| h.pmid).collect();
    assert_eq!(pmids, ["3", "20", "100"]);
}

#[test]
fn idf_is_positive_for_every_df() {
    for n in 1..200u64 {
        for df in 1..=n {
            assert!(Bm25Params::idf(n, df) > 0.0);
        }
    }
}

#[test]
fn search_is_identical_across_thread_counts() {
    let docs: Vec<_> = (0..300)
        .map(|i| doc(&i.to_string(), "", &format!("w{} w{} w{}", i % 7, i % 11, i % 13), None))
        .collect();
    let index = Index::from_documents(docs, abstract_only());
    let baseline = index.search("w1 w2 w3", 50, None);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let parallel: Vec<_> = pool.install(|| {
        use rayon::prelude::*;
        (0..16).into_par_iter().map(|_| index.search("w1 w2 w3", 50, None)).collect()
    });
    assert!(parallel.iter().all(|r| *r == baseline));
}

fn corpus_strategy() -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<usize>, usize)> {
    (
        prop::collection::vec(prop::collection::vec(0..20usize, 1..12), 1..120),
        prop::collection::vec(0..22usize, 1..6),
        1..40usize,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn search_matches_brute_force((docs, query, k) in corpus_strategy()) {
        let texts: Vec<(String, Vec<String>)> = docs
            .iter()
            .enumerate()
            .map(|(i, d)| ((i + 1).to_string(), d.iter().map(|t| format!("t{t}")).collect()))
            .collect();
        let index = Index::from_documents(
            texts.iter().map(|(p, t)| doc(p, "", &t.join(" "), None)),
            abstract_only(),
        );
        let query: Vec<String> = query.iter().map(|t| format!("t{t}")).collect();
        let expected = bm25_brute_force(&texts, &query, 1.2, 0.75);
        let got = index.search(&query.join(" "), k, None);
        prop_assert_eq!(got.len(), expected.len().min(k));
        for (rank, (hit, (pmid, score))) in got.iter().zip(&expected).enumerate() {
            prop_assert_eq!(&hit.pmid, pmid);
            prop_assert!((hit.score - score).abs() < 1e-9);
            prop_assert_eq!(hit.rank, rank + 1);
        }
    }

    #[test]
    fn score_never_decreases_with_tf(
        base in prop::collection::vec(0..6usize, 1..10),
        others in prop::collection::vec(prop::collection::vec(0..6usize, 1..10), 1..10),
        extra in 1..5usize,
    ) {
        let build = |first: &[usize]| {
            let mut docs = vec![doc("1", "", &first.iter().map(|t| format!("t{t}")).collect::<Vec<_>>().join(" "), None)];
            for (i, d) in others.iter().enumerate() {
                docs.push(doc(&(i + 2).to_string(), "", &d.iter().map(|t| format!("t{t}")).collect::<Vec<_>>().join(" "), None));
            }
            Index::from_documents(docs, abstract_only())
        };
        let q = vec!["t0".to_string()];
        // Document length stays fixed: non-query tokens are replaced.
        let mut same_len = base.clone();
        let mut added = 0;
        for t in same_len.iter_mut() {
            if *t != 0 && added < extra {
                *t = 0;
                added += 1;
            }
        }
        let before = build(&base).score(&q, "1").unwrap();
        let after = build(&same_len).score(&q, "1").unwrap();
        prop_assert!(after + 1e-12 >= before, "{} < {}", after, before);
    }

    #[test]
    fn ranks_are_dense_and_scores_non_increasing(docs in prop::collection::vec("[a-e ]{1,30}", 1..60), q in "[a-e ]{1,10}") {
        let index = Index::from_documents(
            docs.iter().enumerate().map(|(i, t)| doc(&(i + 1).to_string(), "", t, None)),
            abstract_only(),
        );
        let hits = index.search(&q, 100, None);
        for (i, h) in hits.iter().enumerate() {
            prop_assert_eq!(h.rank, i + 1);
            prop_assert!(h.score > 0.0);
            if i > 0 {
                prop_assert!(hits[i - 1].score >= h.score);
            }
        }
        let stats = index.stats();
        for df in stats.df.values() {
            prop_assert!(*df > 0 && *df <= stats.doc_count);
        }
    }
}
