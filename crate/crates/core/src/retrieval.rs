//! nDCG@k over TREC-style runs.
//!
//! Gain is `2^rel - 1`, discount `log2(rank + 1)`. Documents are ranked by
//! descending score with ties broken by ascending doc id; the rank column of a
//! run file is ignored. The query population is the qrels: a judged query
//! missing from the run scores 0, as does a query with no relevant documents.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::par::{self, Exec};
use crate::{Error, Result};

pub type Qrels = BTreeMap<String, HashMap<String, u32>>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankedRun {
    pub per_query: BTreeMap<String, Vec<(String, f64)>>,
    pub qrels: Qrels,
}

impl RankedRun {
    pub fn new(qrels: Qrels) -> Self {
        RankedRun {
            per_query: BTreeMap::new(),
            qrels,
        }
    }

    pub fn push(&mut self, query: &str, doc: &str, score: f64) {
        self.per_query
            .entry(query.to_string())
            .or_default()
            .push((doc.to_string(), score));
    }
}

/// Sort a query's retrieved list into rank order.
pub fn rank(docs: &[(String, f64)]) -> Vec<&str> {
    let mut sorted: Vec<&(String, f64)> = docs.iter().collect();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    sorted.into_iter().map(|(d, _)| d.as_str()).collect()
}

fn gain(rel: u32) -> f64 {
    (2f64).powi(rel as i32) - 1.0
}

fn discount(rank0: usize) -> f64 {
    ((rank0 + 2) as f64).log2()
}

pub fn dcg_at_k(ranked: &[&str], judged: &HashMap<String, u32>, k: usize) -> f64 {
    ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(judged.get(*d).copied().unwrap_or(0)) / discount(i))
        .sum()
}

pub fn idcg_at_k(judged: &HashMap<String, u32>, k: usize) -> f64 {
    let mut rels: Vec<u32> = judged.values().copied().filter(|&r| r > 0).collect();
    rels.sort_unstable_by(|a, b| b.cmp(a));
    rels.iter()
        .take(k)
        .enumerate()
        .map(|(i, &r)| gain(r) / discount(i))
        .sum()
}

pub fn query_ndcg(docs: &[(String, f64)], judged: &HashMap<String, u32>, k: usize) -> f64 {
    let ideal = idcg_at_k(judged, k);
    if ideal == 0.0 {
        return 0.0;
    }
    dcg_at_k(&rank(docs), judged, k) / ideal
}

/// Per-query nDCG@k in qrels order.
pub fn per_query_ndcg(run: &RankedRun, k: usize, exec: Exec) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::input("ndcg: k must be >= 1"));
    }
    if run.per_query.is_empty() {
        return Err(Error::input("ndcg: run is empty"));
    }
    if let Some(q) = run.per_query.keys().find(|q| !run.qrels.contains_key(*q)) {
        return Err(Error::input(format!("ndcg: query '{q}' has no qrels")));
    }
    let queries: Vec<(&String, &HashMap<String, u32>)> = run.qrels.iter().collect();
    let empty = Vec::new();
    Ok(par::map(exec, &queries, |(q, judged)| {
        let docs = run.per_query.get(*q).unwrap_or(&empty);
        ((*q).clone(), query_ndcg(docs, judged, k))
    }))
}

pub fn ndcg_at_k_with(run: &RankedRun, k: usize, exec: Exec) -> Result<f64> {
    let scores = per_query_ndcg(run, k, exec)?;
    let sum: f64 = scores.iter().map(|(_, s)| s).sum();
    Ok(sum / scores.len() as f64)
}

/// Mean nDCG@k over the judged queries.
pub fn ndcg_at_k(run: &RankedRun, k: usize) -> Result<f64> {
    ndcg_at_k_with(run, k, Exec::default())
}

/// Score a synthetic population of single-relevant-document queries where
/// `rank1_hits` queries retrieve their document first, `rank5_hits` retrieve
/// it fifth, and the rest miss it entirely. Built as a real run and scored
/// through [`ndcg_at_k`] at k = 10.
pub fn audit_footnote(population: usize, rank1_hits: usize, rank5_hits: usize) -> Result<f64> {
    if population == 0 {
        return Err(Error::input("audit: population must be > 0"));
    }
    if rank1_hits + rank5_hits > population {
        return Err(Error::input(format!(
            "audit: hits {} + {} exceed population {population}",
            rank1_hits, rank5_hits
        )));
    }
    let mut qrels = Qrels::new();
    for q in 0..population {
        let judged = HashMap::from([(format!("rel-{q}"), 1)]);
        qrels.insert(format!("q{q:05}"), judged);
    }
    let mut run = RankedRun::new(qrels);
    for q in 0..population {
        let qid = format!("q{q:05}");
        let relevant_rank = if q < rank1_hits {
            Some(1)
        } else if q < rank1_hits + rank5_hits {
            Some(5)
        } else {
            None
        };
        for r in 1..=10usize {
            let score = (11 - r) as f64;
            if Some(r) == relevant_rank {
                run.push(&qid, &format!("rel-{q}"), score);
            } else {
                run.push(&qid, &format!("noise-{q}-{r}"), score);
            }
        }
    }
    ndcg_at_k(&run, 10)
}

fn parse_err(what: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: what.into(),
        line,
        message: msg.into(),
    }
}

/// Parse a TREC run: `qid Q0 docid rank score tag`.
pub fn parse_trec_run(text: &str) -> Result<BTreeMap<String, Vec<(String, f64)>>> {
    let mut out: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != 6 {
            return Err(parse_err("run", i + 1, format!("expected 6 fields, got {}", f.len())));
        }
        let score: f64 = f[4]
            .parse()
            .map_err(|_| parse_err("run", i + 1, format!("bad score '{}'", f[4])))?;
        out.entry(f[0].to_string())
            .or_default()
            .push((f[2].to_string(), score));
    }
    Ok(out)
}

/// Parse TREC qrels: `qid iter docid rel`.
pub fn parse_trec_qrels(text: &str) -> Result<Qrels> {
    let mut out = Qrels::new();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != 4 {
            return Err(parse_err("qrels", i + 1, format!("expected 4 fields, got {}", f.len())));
        }
        let rel: i64 = f[3]
            .parse()
            .map_err(|_| parse_err("qrels", i + 1, format!("bad relevance '{}'", f[3])))?;
        // negative grades (judged non-relevant in some collections) count as 0
        let rel = rel.max(0) as u32;
        out.entry(f[0].to_string())
            .or_default()
            .insert(f[2].to_string(), rel);
    }
    Ok(out)
}

pub fn format_trec_run(run: &RankedRun, tag: &str) -> String {
    let mut out = String::new();
    for (q, docs) in &run.per_query {
        let mut sorted: Vec<&(String, f64)> = docs.iter().collect();
        sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (i, (d, s)) in sorted.into_iter().enumerate() {
            let _ = writeln!(out, "{q} Q0 {d} {} {s} {tag}", i + 1);
        }
    }
    out
}
