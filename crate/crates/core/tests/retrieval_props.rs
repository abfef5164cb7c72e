use std::collections::HashMap;

use pretrain_core::par::Exec;
use pretrain_core::retrieval::{
    audit_footnote, format_trec_run, ndcg_at_k, ndcg_at_k_with, parse_trec_qrels, parse_trec_run, query_ndcg, Qrels,
    RankedRun,
};
use proptest::prelude::*;

fn docs(scores: &[f64]) -> Vec<(String, f64)> {
    scores.iter().enumerate().map(|(i, &s)| (format!("d{i:02}"), s)).collect()
}

fn judged(rels: &[u32]) -> HashMap<String, u32> {
    rels.iter()
        .enumerate()
        .filter(|(_, &r)| r > 0)
        .map(|(i, &r)| (format!("d{i:02}"), r))
        .collect()
}

/// Textbook nDCG@k with the same gain and discount, computed from positions.
fn oracle(scores: &[f64], rels: &[u32], k: usize) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let gain = |r: u32| 2f64.powi(r as i32) - 1.0;
    let dcg: f64 = order
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &d)| gain(rels[d]) / ((i + 2) as f64).log2())
        .sum();
    let mut ideal: Vec<u32> = rels.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &r)| gain(r) / ((i + 2) as f64).log2())
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

#[test]
fn single_relevant_at_rank_five() {
    let scores = [10.0, 9.0, 8.0, 7.0, 6.0, 5.0];
    let s = query_ndcg(&docs(&scores), &judged(&[0, 0, 0, 0, 1, 0]), 10);
    assert!((s - 1.0 / 6f64.log2()).abs() < 1e-9);
}

#[test]
fn footnote_scenario() {
    assert_eq!(audit_footnote(200, 14, 0).unwrap(), 0.07);
    let v = audit_footnote(200, 14, 125).unwrap();
    assert!((v - 0.312).abs() < 5e-4, "{v}");
    assert_eq!(audit_footnote(7, 7, 0).unwrap(), 1.0);
    assert!(audit_footnote(0, 0, 0).is_err());
    assert!(audit_footnote(3, 2, 2).is_err());
}

#[test]
fn footnote_matches_closed_form_exhaustively() {
    let d5 = 1.0 / 6f64.log2();
    for n in 1..=50usize {
        for a in 0..=n {
            for b in 0..=(n - a) {
                let closed = (a as f64 + b as f64 * d5) / n as f64;
                let got = audit_footnote(n, a, b).unwrap();
                assert!((got - closed).abs() <= 1e-9, "N={n} a={a} b={b}");
            }
        }
    }
}

#[test]
fn unjudged_and_missing_queries() {
    let mut qrels = Qrels::new();
    qrels.insert("q1".into(), judged(&[1]));
    qrels.insert("q2".into(), HashMap::new());
    qrels.insert("q3".into(), judged(&[0, 1]));
    let mut run = RankedRun::new(qrels);
    run.push("q1", "d00", 1.0);
    run.push("q2", "d00", 1.0);
    // q1 perfect, q2 no relevant docs, q3 absent from the run
    assert!((ndcg_at_k(&run, 10).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    run.push("unjudged", "d00", 1.0);
    assert!(ndcg_at_k(&run, 10).is_err());
}

#[test]
fn trec_roundtrip() {
    let qrels = parse_trec_qrels("q1 0 a 1\nq1 0 b 0\nq2 0 c 2\n").unwrap();
    let mut run = RankedRun::new(qrels.clone());
    for (q, d, s) in [("q1", "a", 0.5), ("q1", "b", 0.9), ("q2", "c", 0.1), ("q2", "x", 0.2)] {
        run.push(q, d, s);
    }
    let text = format_trec_run(&run, "t");
    let back = RankedRun {
        per_query: parse_trec_run(&text).unwrap(),
        qrels,
    };
    assert_eq!(ndcg_at_k(&back, 10).unwrap(), ndcg_at_k(&run, 10).unwrap());
    assert_eq!(
        ndcg_at_k_with(&run, 10, Exec::Sequential).unwrap(),
        ndcg_at_k_with(&run, 10, Exec::Parallel).unwrap()
    );
}

fn query() -> impl Strategy<Value = (Vec<f64>, Vec<u32>)> {
    (1usize..25).prop_flat_map(|n| {
        (
            prop::collection::vec(-100.0f64..100.0, n),
            prop::collection::vec(prop::sample::select(vec![0u32, 0, 1, 2, 3]), n),
        )
    })
}

proptest! {
    #[test]
    fn matches_textbook_formula((scores, rels) in query(), k in 1usize..15) {
        let got = query_ndcg(&docs(&scores), &judged(&rels), k);
        prop_assert!((got - oracle(&scores, &rels, k)).abs() < 1e-12);
    }

    #[test]
    fn bounded_in_unit_interval((scores, rels) in query(), k in 1usize..15) {
        let got = query_ndcg(&docs(&scores), &judged(&rels), k);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&got));
    }

    #[test]
    fn invariant_under_monotone_transform((scores, rels) in query(), a in 0.01f64..10.0, b in -50.0f64..50.0) {
        let j = judged(&rels);
        let base = query_ndcg(&docs(&scores), &j, 10);
        let affine: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
        prop_assert!((query_ndcg(&docs(&affine), &j, 10) - base).abs() < 1e-12);
        prop_assert!((query_ndcg(&docs(&cubed), &j, 10) - base).abs() < 1e-12);
    }

    #[test]
    fn promoting_a_relevant_doc_never_hurts((mut scores, graded) in query(), pick in any::<prop::sample::Index>()) {
        // binary judgments: with graded ones, lifting a weaker doc over a stronger one rightly costs
        let rels: Vec<u32> = graded.iter().map(|&r| r.min(1)).collect();
        let relevant: Vec<usize> = (0..rels.len()).filter(|&i| rels[i] > 0).collect();
        prop_assume!(!relevant.is_empty());
        let i = relevant[pick.index(relevant.len())];
        let j = judged(&rels);
        let before = query_ndcg(&docs(&scores), &j, 10);
        let top = scores.iter().cloned().fold(f64::MIN, f64::max);
        scores[i] = top + 1.0;
        prop_assert!(query_ndcg(&docs(&scores), &j, 10) >= before - 1e-12);
    }
}
