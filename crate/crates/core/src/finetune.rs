//! Contrastive fine-tuning of prompted embeddings with in-batch and mined
//! hard negatives, optionally through LoRA adapters and a learned
//! dimension-reducing projection.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compression::{truncated_identity, CompressionDescriptor};
use crate::encode::{embed_batch, embed_graph, resolve_kind};
use crate::error::{Error, Result};
use crate::model::{LoraSet, Model, Trainable};
use crate::numerics::{AdamConfig, Graph, Scalar, Tensor, Var};
use crate::prompt::{PromptTokens, Role, SchemePair};
use crate::retrieval::embed_corpus;
use crate::train::Trainer;

/// A query, its positive document, and mined negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainPair {
    pub query_id: String,
    pub query: Vec<u32>,
    pub positive_id: String,
    pub positive: Vec<u32>,
    pub negatives: Vec<(String, Vec<u32>)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LoraConfig {
    pub rank: usize,
    pub scaling: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct FinetuneConfig {
    pub scheme: SchemePair,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    /// Hard negatives taken per query.
    pub n_hard: usize,
    /// Train adapters only, leaving the base weights untouched.
    pub lora: Option<LoraConfig>,
    /// L2-normalize embeddings before scoring.
    pub normalize: bool,
    /// Learn a `[d × projection_dim]` output projection jointly.
    pub projection_dim: Option<usize>,
    pub grad_clip: Option<f64>,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            scheme: SchemePair::N2S,
            steps: 1000,
            batch_size: 16,
            learning_rate: 1e-4,
            temperature: 1.0,
            n_hard: 1,
            lora: Some(LoraConfig { rank: 8, scaling: 1.0 }),
            normalize: false,
            projection_dim: None,
            grad_clip: Some(1.0),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.temperature > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Config("temperature and learning_rate must be positive".into()));
        }
        if let Some(p) = self.projection_dim {
            if p == 0 || p > d_model {
                return Err(Error::Config(alloc::format!("projection dim {p} must be in 1..={d_model}")));
            }
        }
        Ok(())
    }
}

pub struct FinetuneOutcome<F> {
    pub model: Model<F>,
    pub projection: Option<Tensor<F>>,
    pub curve: Vec<(usize, f64)>,
}

/// Documents of one batch: positives first, then each query's hard
/// negatives. A document already in the pool is not added again.
fn assemble<'p>(batch: &[&'p TrainPair], n_hard: usize) -> (Vec<(&'p str, &'p [u32])>, Vec<usize>) {
    let mut docs: Vec<(&str, &[u32])> = Vec::new();
    let mut at: BTreeMap<&str, usize> = BTreeMap::new();
    let mut positives = Vec::with_capacity(batch.len());
    for p in batch {
        let idx = *at.entry(&p.positive_id).or_insert_with(|| {
            docs.push((&p.positive_id, &p.positive));
            docs.len() - 1
        });
        positives.push(idx);
    }
    for p in batch {
        for (id, text) in p.negatives.iter().take(n_hard) {
            if !at.contains_key(id.as_str()) {
                at.insert(id, docs.len());
                docs.push((id, text));
            }
        }
    }
    (docs, positives)
}

fn check_unique(ids: &[&str]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(*id) {
            return Err(Error::DuplicateDoc(String::from(*id)));
        }
    }
    Ok(())
}

/// Cross-entropy of `q·dᵀ/τ` against each query's positive column.
pub fn contrastive_loss_graph<F: Scalar>(g: &mut Graph<'_, F>, q: Var, d: Var, positives: &[usize], temperature: f64) -> Result<Var> {
    let dt = g.transpose(d)?;
    let sims = g.matmul(q, dt)?;
    let scaled = g.scale(sims, F::from_f64(1.0 / temperature))?;
    let targets: Vec<Vec<(usize, F)>> = positives.iter().map(|&p| alloc::vec![(p, F::one())]).collect();
    g.softmax_cross_entropy(scaled, &targets)
}

/// Eager InfoNCE over query rows `q` and document rows `d` with ids
/// `doc_ids`. Repeated document ids are an error.
pub fn contrastive_loss<F: Scalar>(q: &Tensor<F>, d: &Tensor<F>, doc_ids: &[&str], positives: &[usize], temperature: f64) -> Result<f64> {
    check_unique(doc_ids)?;
    if doc_ids.len() != d.rows() || positives.len() != q.rows() {
        return Err(crate::error::shape_err("contrastive_loss", alloc::format!("{} ids for {} docs", doc_ids.len(), d.rows())));
    }
    let mut g = Graph::new();
    let qv = g.constant(q);
    let dv = g.constant(d);
    let l = contrastive_loss_graph(&mut g, qv, dv, positives, temperature)?;
    Ok(g.value(l).data()[0].to_f64())
}

pub fn run_finetune<F: Scalar>(
    model: Model<F>,
    prompts: &PromptTokens,
    pairs: &[TrainPair],
    cfg: &FinetuneConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<FinetuneOutcome<F>> {
    let d_model = model.config.d_model;
    cfg.validate(d_model)?;
    if pairs.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    let q_kind = resolve_kind(&model, cfg.scheme, Role::Query)?;
    let d_kind = resolve_kind(&model, cfg.scheme, Role::Doc)?;
    let mut model = model;
    let trainable = match cfg.lora {
        Some(l) => {
            if model.lora.is_some() {
                model = model.merge_lora()?;
            }
            model.lora = Some(LoraSet::init(&model.config, l.rank, l.scaling, cfg.seed)?);
            Trainable {
                base: false,
                head: false,
                lora: true,
            }
        }
        None => Trainable {
            base: true,
            head: false,
            lora: false,
        },
    };
    model.scheme = Some(cfg.scheme);
    let mut extras: Vec<Tensor<F>> = cfg.projection_dim.map(|p| truncated_identity(d_model, p)).into_iter().collect();
    let mut trainer = Trainer::new(&model, &extras, trainable, cfg.adam, cfg.grad_clip);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(pairs.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&pairs[order[cursor]]);
            cursor += 1;
        }
        let (docs, positives) = assemble(&batch, cfg.n_hard);
        let diverged = |loss: f64| Error::Diverged {
            step,
            loss,
            record: batch[0].query_id.clone(),
        };
        let (loss, grads) = {
            let mut g = Graph::new();
            let b = model.bind(&mut g, trainable);
            let proj: Vec<(Var, usize)> = extras.iter().map(|t| (g.param(t), 0)).collect();
            let run = |g: &mut Graph<'_, F>| -> Result<Var> {
                let mut qs = Vec::with_capacity(batch.len());
                for p in &batch {
                    qs.push(embed_graph(&model, g, &b, prompts, &p.query, q_kind)?);
                }
                let mut ds = Vec::with_capacity(docs.len());
                for (_, text) in &docs {
                    ds.push(embed_graph(&model, g, &b, prompts, text, d_kind)?);
                }
                let mut q = g.concat_rows(&qs)?;
                let mut d = g.concat_rows(&ds)?;
                if let Some(&(p, _)) = proj.first() {
                    q = g.matmul(q, p)?;
                    d = g.matmul(d, p)?;
                }
                if cfg.normalize {
                    q = g.l2_normalize_rows(q)?;
                    d = g.l2_normalize_rows(d)?;
                }
                contrastive_loss_graph(g, q, d, &positives, cfg.temperature)
            };
            let l = match run(&mut g) {
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                other => other?,
            };
            let loss = g.value(l).data()[0].to_f64();
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            let mut grads = match g.backward(l) {
                Err(Error::NonFinite { .. }) => return Err(diverged(loss)),
                other => other?,
            };
            (loss, trainer.collect(&model, &b, &proj, &g, &mut grads))
        };
        trainer.step(&mut model, &mut extras, grads, cfg.learning_rate)?;
        on_step(step, loss);
        curve.push((step, loss));
    }
    Ok(FinetuneOutcome {
        model,
        projection: extras.pop(),
        curve,
    })
}

/// Fine-tunes with a jointly learned projection to `target_dim` and
/// returns the matching compression descriptor.
pub fn train_dimred(
    model: Model<f32>,
    prompts: &PromptTokens,
    pairs: &[TrainPair],
    target_dim: usize,
    cfg: &FinetuneConfig,
    on_step: impl FnMut(usize, f64),
) -> Result<(FinetuneOutcome<f32>, CompressionDescriptor)> {
    let dim = model.config.d_model;
    let cfg = FinetuneConfig {
        projection_dim: Some(target_dim),
        ..cfg.clone()
    };
    let out = run_finetune(model, prompts, pairs, &cfg, on_step)?;
    let projection = out.projection.as_ref().expect("projection requested").data().to_vec();
    let desc = CompressionDescriptor::DimRed {
        dim,
        target_dim,
        projection,
    };
    Ok((out, desc))
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct MiningConfig {
    /// Negatives are drawn from retrieval ranks `2..=k_window`.
    pub k_window: usize,
    pub n_negatives: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            k_window: 100,
            n_negatives: 1,
            seed: 0,
        }
    }
}

pub struct MinedPairs {
    pub pairs: Vec<TrainPair>,
    /// Negatives filled with random documents for lack of candidates.
    pub random_filled: usize,
}

/// Replaces each pair's negatives with documents sampled from the model's
/// own top ranks, excluding every positive of the query.
pub fn mine_hard_negatives<F: Scalar>(
    model: &Model<F>,
    prompts: &PromptTokens,
    scheme: SchemePair,
    pairs: &[TrainPair],
    corpus: &[(String, Vec<u32>)],
    cfg: &MiningConfig,
) -> Result<MinedPairs> {
    if cfg.k_window < 2 {
        return Err(Error::Config("k_window must be at least 2".into()));
    }
    let index = embed_corpus(model, prompts, corpus, scheme, None, "", 16)?;
    let q_kind = resolve_kind(model, scheme, Role::Query)?;
    let texts: Vec<&[u32]> = pairs.iter().map(|p| p.query.as_slice()).collect();
    let q_embs = embed_batch(model, prompts, &texts, q_kind, 16)?;
    let mut judged: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for p in pairs {
        judged.entry(&p.query_id).or_default().insert(&p.positive_id);
    }
    let by_id: BTreeMap<&str, &[u32]> = corpus.iter().map(|(id, t)| (id.as_str(), t.as_slice())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut random_filled = 0;
    let mut out = Vec::with_capacity(pairs.len());
    for (p, e) in pairs.iter().zip(q_embs) {
        let q: Vec<f32> = e.into_iter().map(|x| x.to_f64() as f32).collect();
        let hits = index.search(&q, cfg.k_window)?.hits;
        let positives = &judged[p.query_id.as_str()];
        let mut candidates: Vec<&str> = hits.iter().skip(1).map(|h| h.0.as_str()).filter(|id| !positives.contains(id)).collect();
        candidates.shuffle(&mut rng);
        candidates.truncate(cfg.n_negatives);
        if candidates.len() < cfg.n_negatives {
            let mut pool: Vec<&str> = corpus
                .iter()
                .map(|(id, _)| id.as_str())
                .filter(|id| !positives.contains(id) && !candidates.contains(id))
                .collect();
            pool.shuffle(&mut rng);
            let need = cfg.n_negatives - candidates.len();
            random_filled += need.min(pool.len());
            candidates.extend(pool.into_iter().take(need));
        }
        out.push(TrainPair {
            negatives: candidates.into_iter().map(|id| (String::from(id), by_id[id].to_vec())).collect(),
            ..p.clone()
        });
    }
    Ok(MinedPairs { pairs: out, random_filled })
}

#[cfg(test)]
mod tests;
