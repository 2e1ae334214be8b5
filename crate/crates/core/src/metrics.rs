//! Ranked-retrieval metrics over judged runs.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Graded relevance judgments: query id → doc id → grade.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Duplicate `(query, doc)` keys are an error.
    pub fn insert(&mut self, query: &str, doc: &str, grade: u32) -> Result<()> {
        let q = self.judgments.entry(query.into()).or_default();
        if q.insert(doc.into(), grade).is_some() {
            return Err(Error::Data(alloc::format!("duplicate judgment for ({query}, {doc})")));
        }
        Ok(())
    }

    pub fn get(&self, query: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query)
    }

    pub fn grade(&self, query: &str, doc: &str) -> u32 {
        self.get(query).and_then(|q| q.get(doc)).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BTreeMap<String, u32>)> {
        self.judgments.iter().map(|(q, d)| (q.as_str(), d))
    }

    pub fn len(&self) -> usize {
        self.judgments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }
}

/// Ranked results: query id → docs by descending score, ties by ascending
/// doc id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Run {
    rankings: BTreeMap<String, Vec<(String, f64)>>,
}

fn rank_order(a: &(String, f64), b: &(String, f64)) -> core::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

impl Run {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sorts `docs` into rank order. Duplicate doc ids or non-finite
    /// scores are an error.
    pub fn insert(&mut self, query: &str, mut docs: Vec<(String, f64)>) -> Result<()> {
        if docs.iter().any(|d| !d.1.is_finite()) {
            return Err(Error::Data(alloc::format!("non-finite score for query {query}")));
        }
        docs.sort_by(rank_order);
        if let Some(w) = docs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Data(alloc::format!("doc {} ranked twice for query {query}", w[0].0)));
        }
        if self.rankings.insert(query.into(), docs).is_some() {
            return Err(Error::Data(alloc::format!("query {query} appears twice in run")));
        }
        Ok(())
    }

    pub fn get(&self, query: &str) -> Option<&[(String, f64)]> {
        self.rankings.get(query).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[(String, f64)])> {
        self.rankings.iter().map(|(q, d)| (q.as_str(), d.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rankings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rankings.is_empty()
    }
}

/// Mean over evaluated queries, with the ids of run queries that had no
/// judgments and were left out.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricResult {
    pub value: f64,
    pub evaluated: usize,
    pub excluded: Vec<String>,
}

fn evaluate(run: &Run, qrels: &Qrels, per_query: impl Fn(&[(String, f64)], &BTreeMap<String, u32>) -> f64) -> MetricResult {
    let mut sum = 0.0;
    let mut evaluated = 0;
    let mut excluded = Vec::new();
    for (q, docs) in run.iter() {
        match qrels.get(q) {
            Some(j) => {
                sum += per_query(docs, j);
                evaluated += 1;
            }
            None => excluded.push(q.into()),
        }
    }
    MetricResult {
        value: if evaluated == 0 { 0.0 } else { sum / evaluated as f64 },
        evaluated,
        excluded,
    }
}

/// Reciprocal rank of the first doc with positive grade in the top `k`.
pub fn mrr_at_k(run: &Run, qrels: &Qrels, k: usize) -> MetricResult {
    evaluate(run, qrels, |docs, j| {
        docs.iter()
            .take(k)
            .position(|(d, _)| j.get(d).copied().unwrap_or(0) > 0)
            .map_or(0.0, |i| 1.0 / (i + 1) as f64)
    })
}

/// Fraction of positively graded docs found in the top `k`.
pub fn recall_at_k(run: &Run, qrels: &Qrels, k: usize) -> MetricResult {
    evaluate(run, qrels, |docs, j| {
        let relevant = j.values().filter(|&&g| g > 0).count();
        if relevant == 0 {
            return 0.0;
        }
        let found = docs.iter().take(k).filter(|(d, _)| j.get(d).copied().unwrap_or(0) > 0).count();
        found as f64 / relevant as f64
    })
}

fn dcg(grades: impl Iterator<Item = u32>) -> f64 {
    grades
        .enumerate()
        .map(|(i, g)| (num_traits::Float::exp2(g as f64) - 1.0) / num_traits::Float::log2((i + 2) as f64))
        .sum()
}

/// Normalized DCG with gain `2^grade − 1` and discount `log2(rank + 1)`.
/// Queries without positive judgments score zero.
pub fn ndcg_at_k(run: &Run, qrels: &Qrels, k: usize) -> MetricResult {
    evaluate(run, qrels, |docs, j| {
        let mut ideal: Vec<u32> = j.values().copied().filter(|&g| g > 0).collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg = dcg(ideal.into_iter().take(k));
        if idcg == 0.0 {
            return 0.0;
        }
        dcg(docs.iter().take(k).map(|(d, _)| j.get(d).copied().unwrap_or(0))) / idcg
    })
}
