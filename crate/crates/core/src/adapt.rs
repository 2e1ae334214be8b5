//! Embedding-based auto-encoding and auto-regression: the SELF anchor must
//! predict the input's tokens and the NEXT anchor the following text's
//! tokens, both through the frozen-or-trainable vocabulary head, as an
//! order-free multiset target.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encode::embed_joint_graph;
use crate::error::{Error, Result};
use crate::model::{BoundModel, Model, Trainable};
use crate::numerics::{AdamConfig, Graph, Scalar, Var};
use crate::prompt::PromptTokens;
use crate::train::Trainer;

/// A text and the text that follows it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdaptRecord {
    pub id: String,
    pub text: Vec<u32>,
    pub next: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct AdaptConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ebae_weight: f64,
    pub ebar_weight: f64,
    /// Train the vocabulary head along with the body.
    pub train_head: bool,
    pub grad_clip: Option<f64>,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            steps: 2000,
            batch_size: 32,
            learning_rate: 1e-4,
            ebae_weight: 1.0,
            ebar_weight: 1.0,
            train_head: true,
            grad_clip: Some(1.0),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.ebae_weight < 0.0 || self.ebar_weight < 0.0 || self.ebae_weight + self.ebar_weight == 0.0 {
            return Err(Error::Config("loss weights must be non-negative and not both zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub ebae: f64,
    pub ebar: f64,
}

pub struct AdaptOutcome<F> {
    pub model: Model<F>,
    pub curve: Vec<LossPoint>,
}

/// Token counts of `tokens` as `(id, count)` pairs in ascending id order.
pub fn target_multiset<F: Scalar>(tokens: &[u32], vocab: usize) -> Result<Vec<(usize, F)>> {
    if tokens.is_empty() {
        return Err(Error::EmptyTargets);
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &t in tokens {
        if t as usize >= vocab {
            return Err(Error::TokenOutOfVocab { id: t, vocab });
        }
        *counts.entry(t as usize).or_insert(0) += 1;
    }
    Ok(counts.into_iter().map(|(t, c)| (t, F::from_f64(c as f64))).collect())
}

/// Batch-mean EBAE and EBAR losses, each a `[1×1]` node.
pub fn adapt_loss_graph<F: Scalar>(
    model: &Model<F>,
    g: &mut Graph<'_, F>,
    b: &BoundModel,
    prompts: &PromptTokens,
    records: &[&AdaptRecord],
) -> Result<(Var, Var)> {
    let vocab = model.config.vocab_size;
    let mut alpha_rows = Vec::with_capacity(records.len());
    let mut beta_rows = Vec::with_capacity(records.len());
    let mut ae_targets = Vec::with_capacity(records.len());
    let mut ar_targets = Vec::with_capacity(records.len());
    for r in records {
        let (rows, kept) = embed_joint_graph(model, g, b, prompts, &r.text)?;
        alpha_rows.push(g.select_rows(rows, &[0])?);
        beta_rows.push(g.select_rows(rows, &[1])?);
        ae_targets.push(target_multiset(&r.text[..kept], vocab)?);
        ar_targets.push(target_multiset(&r.next, vocab)?);
    }
    let alpha = g.concat_rows(&alpha_rows)?;
    let beta = g.concat_rows(&beta_rows)?;
    let la = model.logits_graph(g, b, alpha)?;
    let lb = model.logits_graph(g, b, beta)?;
    let ebae = g.softmax_cross_entropy(la, &ae_targets)?;
    let ebar = g.softmax_cross_entropy(lb, &ar_targets)?;
    Ok((ebae, ebar))
}

/// Eager `(EBAE, EBAR)` means over `records`.
pub fn adapt_loss<F: Scalar>(model: &Model<F>, prompts: &PromptTokens, records: &[AdaptRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut g = Graph::new();
    let b = model.bind(&mut g, Trainable::NONE);
    let refs: Vec<&AdaptRecord> = records.iter().collect();
    let (ae, ar) = adapt_loss_graph(model, &mut g, &b, prompts, &refs)?;
    Ok((g.value(ae).data()[0].to_f64(), g.value(ar).data()[0].to_f64()))
}

fn validate_records(records: &[AdaptRecord], vocab: usize) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Data("adaptation corpus is empty".into()));
    }
    for r in records {
        if r.text.is_empty() {
            return Err(Error::Data(alloc::format!("record `{}` has empty text", r.id)));
        }
        if r.next.is_empty() {
            return Err(Error::Data(alloc::format!("record `{}` has empty next text", r.id)));
        }
        if let Some(&t) = r.text.iter().chain(&r.next).find(|&&t| t as usize >= vocab) {
            return Err(Error::TokenOutOfVocab { id: t, vocab });
        }
    }
    Ok(())
}

/// Trains the whole base model on the weighted EBAE + EBAR objective.
///
/// Batches are drawn by reshuffling the corpus each epoch. Training aborts
/// with [`Error::Diverged`] on a non-finite loss or one above `10·ln|V|`.
pub fn run_adaptation<F: Scalar>(
    model: Model<F>,
    prompts: &PromptTokens,
    records: &[AdaptRecord],
    cfg: &AdaptConfig,
    mut on_step: impl FnMut(&LossPoint),
) -> Result<AdaptOutcome<F>> {
    cfg.validate()?;
    validate_records(records, model.config.vocab_size)?;
    let mut model = model;
    let mut curve = Vec::with_capacity(cfg.steps);
    if cfg.steps == 0 {
        return Ok(AdaptOutcome { model, curve });
    }
    let trainable = Trainable {
        base: true,
        head: cfg.train_head,
        lora: false,
    };
    let mut trainer = Trainer::new(&model, &[], trainable, cfg.adam, cfg.grad_clip);
    let limit = 10.0 * num_traits::Float::ln(model.config.vocab_size as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut cursor = order.len();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(records.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&records[order[cursor]]);
            cursor += 1;
        }
        let first = batch[0].id.clone();
        let diverged = |loss: f64| Error::Diverged {
            step,
            loss,
            record: first.clone(),
        };
        let (point, grads) = {
            let mut g = Graph::new();
            let b = model.bind(&mut g, trainable);
            let (ae, ar) = match adapt_loss_graph(&model, &mut g, &b, prompts, &batch) {
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                other => other?,
            };
            let wa = g.scale(ae, F::from_f64(cfg.ebae_weight))?;
            let wr = g.scale(ar, F::from_f64(cfg.ebar_weight))?;
            let total = g.add(wa, wr)?;
            let point = LossPoint {
                step,
                ebae: g.value(ae).data()[0].to_f64(),
                ebar: g.value(ar).data()[0].to_f64(),
            };
            let loss = g.value(total).data()[0].to_f64();
            if !loss.is_finite() || loss > limit {
                return Err(diverged(loss));
            }
            let mut grads = match g.backward(total) {
                Err(Error::NonFinite { .. }) => return Err(diverged(loss)),
                other => other?,
            };
            let grads = trainer.collect(&model, &b, &[], &g, &mut grads);
            (point, grads)
        };
        trainer.step(&mut model, &mut [], grads, cfg.learning_rate)?;
        on_step(&point);
        curve.push(point);
    }
    Ok(AdaptOutcome { model, curve })
}
