//! BM25 over token ids, projection of embeddings onto the vocabulary, and
//! the lexical-overlap diagnostic built from both.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::encode::embed_batch;
use crate::error::{Error, Result};
use crate::model::{Embedding, Model};
use crate::numerics::{Scalar, Tensor};
use crate::prompt::{PromptKind, PromptTokens, SchemePair};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Clone, Debug)]
pub struct Bm25Index {
    params: Bm25Params,
    ids: Vec<String>,
    lookup: BTreeMap<String, usize>,
    doc_len: Vec<usize>,
    avg_len: f64,
    /// term → (doc, term frequency), docs ascending.
    postings: BTreeMap<u32, Vec<(usize, u32)>>,
}

impl Bm25Index {
    pub fn build(params: Bm25Params, docs: &[(String, Vec<u32>)]) -> Result<Self> {
        let mut lookup = BTreeMap::new();
        let mut postings: BTreeMap<u32, Vec<(usize, u32)>> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(docs.len());
        for (i, (id, terms)) in docs.iter().enumerate() {
            if lookup.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateDoc(id.clone()));
            }
            let mut tf: BTreeMap<u32, u32> = BTreeMap::new();
            for &t in terms {
                *tf.entry(t).or_insert(0) += 1;
            }
            for (t, c) in tf {
                postings.entry(t).or_default().push((i, c));
            }
            doc_len.push(terms.len());
        }
        let total: usize = doc_len.iter().sum();
        let avg_len = if docs.is_empty() { 0.0 } else { total as f64 / docs.len() as f64 };
        Ok(Bm25Index {
            params,
            ids: docs.iter().map(|(id, _)| id.clone()).collect(),
            lookup,
            doc_len,
            avg_len,
            postings,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn doc_freq(&self, term: u32) -> usize {
        self.postings.get(&term).map_or(0, |p| p.len())
    }

    /// `ln((N − df + 0.5)/(df + 0.5) + 1)`.
    pub fn idf(&self, term: u32) -> f64 {
        let n = self.ids.len() as f64;
        let df = self.doc_freq(term) as f64;
        num_traits::Float::ln((n - df + 0.5) / (df + 0.5) + 1.0)
    }

    fn term_weight(&self, tf: u32, doc: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = if self.avg_len > 0.0 { self.doc_len[doc] as f64 / self.avg_len } else { 0.0 };
        tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm))
    }

    fn score_idx(&self, query: &[u32], doc: usize) -> f64 {
        let mut s = 0.0;
        for &t in query {
            if let Some(p) = self.postings.get(&t) {
                if let Ok(pos) = p.binary_search_by_key(&doc, |e| e.0) {
                    s += self.idf(t) * self.term_weight(p[pos].1, doc);
                }
            }
        }
        s
    }

    /// Sum over query terms (repeats included) of idf times saturated tf.
    pub fn score(&self, query: &[u32], doc_id: &str) -> Result<f64> {
        let &doc = self.lookup.get(doc_id).ok_or_else(|| Error::UnknownDoc(doc_id.to_string()))?;
        Ok(self.score_idx(query, doc))
    }

    /// Top `k` docs with a positive score, by descending score then id.
    pub fn search(&self, query: &[u32], k: usize) -> Vec<(String, f64)> {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for &t in query {
            if let Some(p) = self.postings.get(&t) {
                let idf = self.idf(t);
                for &(doc, tf) in p {
                    *acc.entry(doc).or_insert(0.0) += idf * self.term_weight(tf, doc);
                }
            }
        }
        let mut hits: Vec<(String, f64)> = acc.into_iter().map(|(d, s)| (self.ids[d].clone(), s)).collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        hits.truncate(k);
        hits
    }
}

/// The `N` highest-logit vocabulary ids of an embedding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabProjection {
    pub kind: PromptKind,
    pub tokens: Vec<u32>,
}

/// Vocabulary ids ordered by descending logit, ties by ascending id.
fn ranked_vocab<F: Scalar>(logits: &[F]) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..logits.len() as u32).collect();
    ids.sort_by(|&a, &b| logits[b as usize].to_f64().total_cmp(&logits[a as usize].to_f64()).then(a.cmp(&b)));
    ids
}

pub fn vocab_project<F: Scalar>(model: &Model<F>, emb: &Embedding<F>, n: usize) -> Result<VocabProjection> {
    let h = Tensor::new(alloc::vec![1, emb.values.len()], emb.values.clone())?;
    let logits = model.logits(&h)?;
    let mut tokens = ranked_vocab(logits.data());
    tokens.truncate(n);
    Ok(VocabProjection { kind: emb.kind, tokens })
}

/// Mean BM25 score between each query's and its answer's vocabulary
/// projections, one row per `N` and one column per checkpoint. Answer
/// projections of all pairs form the BM25 collection.
#[derive(Clone, Debug, PartialEq)]
pub struct LexicalReport {
    pub ns: Vec<usize>,
    pub scores: Vec<Vec<f64>>,
}

pub fn lexical_similarity_report<F: Scalar>(
    checkpoints: &[&Model<F>],
    prompts: &PromptTokens,
    scheme: SchemePair,
    pairs: &[(Vec<u32>, Vec<u32>)],
    ns: &[usize],
) -> Result<LexicalReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let queries: Vec<&[u32]> = pairs.iter().map(|p| p.0.as_slice()).collect();
    let answers: Vec<&[u32]> = pairs.iter().map(|p| p.1.as_slice()).collect();
    let mut scores = alloc::vec![Vec::with_capacity(checkpoints.len()); ns.len()];
    for model in checkpoints {
        let rank = |texts: &[&[u32]], kind: PromptKind| -> Result<Vec<Vec<u32>>> {
            let embs = embed_batch(*model, prompts, texts, kind, 16)?;
            let d = model.config.d_model;
            let flat: Vec<F> = embs.into_iter().flatten().collect();
            let logits = model.logits(&Tensor::new(alloc::vec![texts.len(), d], flat)?)?;
            Ok((0..texts.len()).map(|i| ranked_vocab(logits.row(i))).collect())
        };
        let q_ranked = rank(&queries, scheme.query_kind())?;
        let a_ranked = rank(&answers, scheme.doc_kind())?;
        for (row, &n) in scores.iter_mut().zip(ns) {
            let docs: Vec<(String, Vec<u32>)> = a_ranked
                .iter()
                .enumerate()
                .map(|(i, r)| (i.to_string(), r[..n.min(r.len())].to_vec()))
                .collect();
            let index = Bm25Index::build(Bm25Params::default(), &docs)?;
            let mut total = 0.0;
            for (i, q) in q_ranked.iter().enumerate() {
                total += index.score_idx(&q[..n.min(q.len())], i);
            }
            row.push(total / pairs.len() as f64);
        }
    }
    Ok(LexicalReport { ns: ns.to_vec(), scores })
}
