//! Pipeline stages over in-memory data, shared by the CLI and tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ebadapt_core::adapt::AdaptRecord;
use ebadapt_core::compression::{distill_dimred, CompressionDescriptor};
use ebadapt_core::encode::embed_batch;
use ebadapt_core::finetune::{mine_hard_negatives, run_finetune, train_dimred, FinetuneOutcome, TrainPair};
use ebadapt_core::metrics::{mrr_at_k, ndcg_at_k, recall_at_k, MetricResult, Qrels, Run};
use ebadapt_core::model::{Model, ModelConfig};
use ebadapt_core::prompt::{PromptKind, PromptTokens, Role, SchemePair, NEXT_PROMPT, SELF_PROMPT};
use ebadapt_core::retrieval::{index_from_embeddings, query_kind, run_from_embeddings, DenseIndex};
use ebadapt_core::synth::SynthCorpus;
use ebadapt_core::tokenizer::Tokenizer;

use crate::config::PipelineConfig;
use crate::error::{Context, Error, Result};
use crate::formats::checkpoint::Checkpoint;
use crate::formats::tables::Comparison;
use crate::formats::trec::{load_qrels, save_qrels};
use crate::formats::{load_jsonl, save_jsonl, CorpusRecord, PairRecord, TextRecord};

pub const ADAPT_FILE: &str = "adapt.jsonl";
pub const DOCS_FILE: &str = "docs.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const QRELS_FILE: &str = "qrels.tsv";

/// A task on disk: adaptation stream, retrieval collection, training pairs,
/// evaluation queries and their judgments.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusFiles {
    pub adapt: Vec<CorpusRecord>,
    pub docs: Vec<TextRecord>,
    pub train: Vec<PairRecord>,
    pub queries: Vec<TextRecord>,
    pub qrels: Qrels,
}

fn text_records(v: &[(String, String)]) -> Vec<TextRecord> {
    v.iter()
        .map(|(id, text)| TextRecord {
            id: id.clone(),
            text: text.clone(),
        })
        .collect()
}

impl CorpusFiles {
    pub fn from_synth(c: &SynthCorpus) -> Self {
        CorpusFiles {
            adapt: c
                .adapt
                .iter()
                .map(|r| CorpusRecord {
                    id: r.id.clone(),
                    text: r.text.clone(),
                    next: r.next.clone(),
                })
                .collect(),
            docs: text_records(&c.docs),
            train: c
                .train
                .iter()
                .map(|p| PairRecord {
                    query_id: p.query_id.clone(),
                    query: p.query.clone(),
                    positive_id: p.positive_id.clone(),
                    positive: p.positive.clone(),
                    negatives: Vec::new(),
                })
                .collect(),
            queries: text_records(&c.queries),
            qrels: c.qrels.clone(),
        }
    }

    pub fn paths(dir: &Path) -> [PathBuf; 5] {
        [ADAPT_FILE, DOCS_FILE, TRAIN_FILE, QUERIES_FILE, QRELS_FILE].map(|f| dir.join(f))
    }

    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let [a, d, t, q, r] = Self::paths(dir);
        save_jsonl(&a, &self.adapt)?;
        save_jsonl(&d, &self.docs)?;
        save_jsonl(&t, &self.train)?;
        save_jsonl(&q, &self.queries)?;
        save_qrels(&r, &self.qrels)?;
        Ok(vec![a, d, t, q, r])
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let [a, d, t, q, r] = Self::paths(dir);
        Ok(CorpusFiles {
            adapt: load_jsonl(&a)?,
            docs: load_jsonl(&d)?,
            train: load_jsonl(&t)?,
            queries: load_jsonl(&q)?,
            qrels: load_qrels(&r)?,
        })
    }

    /// Every text of the task, prompts included.
    pub fn texts(&self) -> Vec<&str> {
        let mut out = vec![SELF_PROMPT, NEXT_PROMPT];
        for r in &self.adapt {
            out.push(&r.text);
            out.push(&r.next);
        }
        out.extend(self.docs.iter().map(|d| d.text.as_str()));
        out.extend(self.queries.iter().map(|q| q.text.as_str()));
        for p in &self.train {
            out.push(&p.query);
            out.push(&p.positive);
            out.extend(p.negatives.iter().map(|n| n.text.as_str()));
        }
        out
    }

    /// Each evaluation query with its lowest-id relevant document.
    pub fn judged_pairs(&self) -> Result<Vec<(&str, &str)>> {
        let docs: BTreeMap<&str, &str> = self.docs.iter().map(|d| (d.id.as_str(), d.text.as_str())).collect();
        let mut out = Vec::new();
        for q in &self.queries {
            let Some(judged) = self.qrels.get(&q.id) else { continue };
            let Some(doc) = judged.iter().find(|(_, &g)| g > 0).map(|(d, _)| d) else { continue };
            let text = docs
                .get(doc.as_str())
                .ok_or_else(|| Error::format(Path::new(QRELS_FILE), format!("query {}: unknown document {doc}", q.id)))?;
            out.push((q.text.as_str(), *text));
        }
        Ok(out)
    }
}

pub fn build_tokenizer(files: &CorpusFiles, max_vocab: usize) -> Tokenizer {
    Tokenizer::build(files.texts(), max_vocab)
}

pub fn init_model(cfg: &PipelineConfig, tok: &Tokenizer) -> Result<Model<f32>> {
    let mc = ModelConfig {
        vocab_size: tok.vocab_size(),
        ..cfg.model.clone()
    };
    Model::init(mc, cfg.model_seed).context("model config")
}

pub fn adapt_records(tok: &Tokenizer, recs: &[CorpusRecord]) -> Vec<AdaptRecord> {
    recs.iter()
        .map(|r| AdaptRecord {
            id: r.id.clone(),
            text: tok.encode(&r.text),
            next: tok.encode(&r.next),
        })
        .collect()
}

pub fn encode_texts(tok: &Tokenizer, recs: &[TextRecord]) -> Vec<(String, Vec<u32>)> {
    recs.iter().map(|r| (r.id.clone(), tok.encode(&r.text))).collect()
}

pub fn train_pairs(tok: &Tokenizer, recs: &[PairRecord]) -> Vec<TrainPair> {
    recs.iter()
        .map(|p| TrainPair {
            query_id: p.query_id.clone(),
            query: tok.encode(&p.query),
            positive_id: p.positive_id.clone(),
            positive: tok.encode(&p.positive),
            negatives: encode_texts(tok, &p.negatives),
        })
        .collect()
}

/// Text form of mined pairs; negative texts come from the collection.
pub fn pair_records(pairs: &[TrainPair], source: &[PairRecord], docs: &[TextRecord]) -> Vec<PairRecord> {
    let by_id: BTreeMap<&str, &str> = docs.iter().map(|d| (d.id.as_str(), d.text.as_str())).collect();
    pairs
        .iter()
        .zip(source)
        .map(|(p, s)| PairRecord {
            negatives: p
                .negatives
                .iter()
                .map(|(id, _)| TextRecord {
                    id: id.clone(),
                    text: by_id.get(id.as_str()).map_or_else(String::new, |t| t.to_string()),
                })
                .collect(),
            ..s.clone()
        })
        .collect()
}

/// Embeds texts on up to `threads` workers. Each text is embedded
/// independently, so the result does not depend on the split.
pub fn embed_parallel(
    model: &Model<f32>,
    prompts: &PromptTokens,
    texts: &[&[u32]],
    kind: PromptKind,
    batch: usize,
    threads: usize,
) -> ebadapt_core::Result<Vec<Vec<f32>>> {
    let threads = threads.clamp(1, texts.len().max(1));
    if threads == 1 {
        return embed_batch(model, prompts, texts, kind, batch);
    }
    let chunk = texts.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = texts
            .chunks(chunk)
            .map(|part| s.spawn(move || embed_batch(model, prompts, part, kind, batch)))
            .collect();
        let mut out = Vec::with_capacity(texts.len());
        for h in handles {
            out.extend(h.join().expect("embedding worker panicked")?);
        }
        Ok(out)
    })
}

/// Options shared by the embedding stages.
#[derive(Clone, Copy, Debug)]
pub struct EmbedOpts {
    pub batch: usize,
    pub threads: usize,
    /// Scale embeddings to unit length, for checkpoints trained on cosine
    /// similarity.
    pub normalize: bool,
}

impl EmbedOpts {
    pub fn for_checkpoint(ck: &Checkpoint, batch: usize, threads: usize) -> Self {
        EmbedOpts {
            batch,
            threads,
            normalize: ck.finetune.as_ref().is_some_and(|f| f.normalize),
        }
    }
}

fn embed_for(
    model: &Model<f32>,
    prompts: &PromptTokens,
    texts: &[&[u32]],
    kind: PromptKind,
    opts: EmbedOpts,
) -> ebadapt_core::Result<Vec<Vec<f32>>> {
    let mut embs = embed_parallel(model, prompts, texts, kind, opts.batch, opts.threads)?;
    if opts.normalize {
        for e in &mut embs {
            let norm = e.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
            if norm > 0.0 {
                e.iter_mut().for_each(|x| *x = (f64::from(*x) / norm) as f32);
            }
        }
    }
    Ok(embs)
}

pub fn build_index(
    model: &Model<f32>,
    prompts: &PromptTokens,
    docs: &[(String, Vec<u32>)],
    scheme: SchemePair,
    compression: Option<CompressionDescriptor>,
    model_checksum: &str,
    opts: EmbedOpts,
) -> ebadapt_core::Result<DenseIndex> {
    let kind = ebadapt_core::encode::resolve_kind(model, scheme, Role::Doc)?;
    let texts: Vec<&[u32]> = docs.iter().map(|d| d.1.as_slice()).collect();
    let embs = embed_for(model, prompts, &texts, kind, opts)?;
    let ids = docs.iter().map(|d| d.0.clone()).collect();
    index_from_embeddings(model, ids, embs, scheme, compression, model_checksum)
}

pub fn search(
    model: &Model<f32>,
    prompts: &PromptTokens,
    index: &DenseIndex,
    queries: &[(String, Vec<u32>)],
    scheme: SchemePair,
    k: usize,
    opts: EmbedOpts,
) -> ebadapt_core::Result<Run> {
    let kind = query_kind(model, index, scheme)?;
    let texts: Vec<&[u32]> = queries.iter().map(|q| q.1.as_slice()).collect();
    let embs = embed_for(model, prompts, &texts, kind, opts)?;
    let ids: Vec<String> = queries.iter().map(|q| q.0.clone()).collect();
    run_from_embeddings(index, &ids, embs, k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub k: usize,
    pub mrr: MetricResult,
    pub recall: MetricResult,
    pub ndcg: MetricResult,
}

pub fn evaluate(run: &Run, qrels: &Qrels, k: usize) -> Metrics {
    Metrics {
        k,
        mrr: mrr_at_k(run, qrels, k),
        recall: recall_at_k(run, qrels, k),
        ndcg: ndcg_at_k(run, qrels, k),
    }
}

impl Metrics {
    /// `name@k=value` lines plus query counts.
    pub fn to_text(&self) -> String {
        let k = self.k;
        format!(
            "mrr@{k}={:.6}\nrecall@{k}={:.6}\nndcg@{k}={:.6}\nqueries={}\nexcluded={}\n",
            self.mrr.value, self.recall.value, self.ndcg.value, self.mrr.evaluated, self.mrr.excluded.len()
        )
    }
}

/// Mines negatives if configured, then fine-tunes. With `dim`, a projection
/// to that width is learned jointly and returned as a descriptor.
pub fn finetune(
    start: Model<f32>,
    prompts: &PromptTokens,
    pairs: &[TrainPair],
    docs: &[(String, Vec<u32>)],
    cfg: &PipelineConfig,
    dim: Option<usize>,
    on_step: impl FnMut(usize, f64),
) -> ebadapt_core::Result<(FinetuneOutcome<f32>, Option<CompressionDescriptor>, Vec<TrainPair>)> {
    let ft = &cfg.finetune;
    let pairs = if cfg.mine_negatives && ft.n_hard > 0 {
        mine_hard_negatives(&start, prompts, ft.scheme, pairs, docs, &cfg.mining)?.pairs
    } else {
        pairs.to_vec()
    };
    match dim {
        Some(d) => {
            let (out, desc) = train_dimred(start, prompts, &pairs, d, ft, on_step)?;
            Ok((out, Some(desc), pairs))
        }
        None => Ok((run_finetune(start, prompts, &pairs, ft, on_step)?, None, pairs)),
    }
}

/// Distills a `dim`-wide projection on the training pairs.
pub fn distill(
    model: &Model<f32>,
    prompts: &PromptTokens,
    pairs: &[TrainPair],
    scheme: SchemePair,
    dim: usize,
    cfg: &PipelineConfig,
) -> ebadapt_core::Result<CompressionDescriptor> {
    let q: Vec<&[u32]> = pairs.iter().map(|p| p.query.as_slice()).collect();
    let d: Vec<&[u32]> = pairs.iter().map(|p| p.positive.as_slice()).collect();
    Ok(distill_dimred(model, prompts, scheme, &q, &d, dim, &cfg.distill)?.0)
}

/// MRR at the configured cutoff for the uncompressed index, top-N
/// sparsification, and a distilled projection, at each budget.
#[allow(clippy::too_many_arguments)]
pub fn compression_report(
    model: &Model<f32>,
    prompts: &PromptTokens,
    docs: &[(String, Vec<u32>)],
    queries: &[(String, Vec<u32>)],
    qrels: &Qrels,
    pairs: &[TrainPair],
    scheme: SchemePair,
    cfg: &PipelineConfig,
    opts: EmbedOpts,
) -> ebadapt_core::Result<Comparison> {
    let k = cfg.eval_k;
    let score = |c: Option<CompressionDescriptor>| -> ebadapt_core::Result<f64> {
        let index = build_index(model, prompts, docs, scheme, c, "", opts)?;
        let run = search(model, prompts, &index, queries, scheme, k, opts)?;
        Ok(mrr_at_k(&run, qrels, k).value)
    };
    let full = score(None)?;
    let d = model.config.d_model;
    let mut rows = Vec::new();
    for b in cfg.budgets_for(d) {
        let sparse = score(Some(CompressionDescriptor::sparse(d, b)?))?;
        let star = score(Some(distill(model, prompts, pairs, scheme, b, cfg)?))?;
        rows.push((b, vec![full, sparse, star]));
    }
    Ok(Comparison {
        key: "budget".into(),
        columns: vec!["full".into(), "sparse".into(), "dimred_star".into()],
        rows,
    })
}
