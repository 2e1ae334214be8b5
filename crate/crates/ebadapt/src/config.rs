//! Pipeline configuration. Values resolve as flags, then the JSON config
//! file, then the defaults below.
//!
//! Defaults are desk scale: a 4-layer, 64-wide model trained for minutes on
//! one CPU core.

use std::path::Path;

use ebadapt_core::adapt::AdaptConfig;
use ebadapt_core::compression::DistillConfig;
use ebadapt_core::finetune::{FinetuneConfig, LoraConfig, MiningConfig};
use ebadapt_core::model::ModelConfig;
use ebadapt_core::prompt::{route_scheme, SchemePair};
use ebadapt_core::synth::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::read_text;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    /// Cap on non-special vocabulary entries.
    pub max_vocab: usize,
    /// `vocab_size` is replaced by the tokenizer's size at initialization.
    pub model: ModelConfig,
    pub model_seed: u64,
    pub adapt: AdaptConfig,
    /// Query/document prompt assignment; routed from the task's
    /// relationship when unset.
    pub scheme: Option<SchemePair>,
    pub finetune: FinetuneConfig,
    /// Replace training negatives with ones mined from the starting model.
    pub mine_negatives: bool,
    pub mining: MiningConfig,
    pub distill: DistillConfig,
    /// Documents retrieved per query.
    pub top_k: usize,
    /// Cutoff for the printed metrics.
    pub eval_k: usize,
    /// Vocabulary-projection sizes of the lexical diagnostic.
    pub lexical_ns: Vec<usize>,
    /// Compression budgets of the report; empty means d/8, d/4, d/2, d.
    pub budgets: Vec<usize>,
    pub embed_batch: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            synth: SynthConfig {
                seed: 1,
                ..SynthConfig::default()
            },
            max_vocab: 4000,
            model: ModelConfig {
                n_layers: 4,
                n_heads: 4,
                d_model: 64,
                d_ff: 256,
                max_seq_len: 64,
                ..ModelConfig::default()
            },
            model_seed: 7,
            adapt: AdaptConfig {
                steps: 2000,
                batch_size: 16,
                learning_rate: 1e-3,
                seed: 3,
                ..AdaptConfig::default()
            },
            scheme: None,
            finetune: FinetuneConfig {
                steps: 1000,
                batch_size: 16,
                learning_rate: 1e-3,
                temperature: 0.05,
                normalize: true,
                n_hard: 1,
                lora: Some(LoraConfig { rank: 8, scaling: 1.0 }),
                ..FinetuneConfig::default()
            },
            mine_negatives: true,
            mining: MiningConfig {
                k_window: 30,
                n_negatives: 1,
                seed: 1,
            },
            distill: DistillConfig::default(),
            top_k: 100,
            eval_k: 10,
            lexical_ns: vec![10, 100, 500, 1000],
            budgets: Vec::new(),
            embed_batch: 16,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn resolved_scheme(&self) -> SchemePair {
        self.scheme.unwrap_or_else(|| route_scheme(self.synth.relationship))
    }

    pub fn budgets_for(&self, d: usize) -> Vec<usize> {
        if self.budgets.is_empty() {
            vec![(d / 8).max(1), (d / 4).max(1), (d / 2).max(1), d]
        } else {
            self.budgets.clone()
        }
    }
}

/// Worker threads: the flag, then `EBADAPT_THREADS`, then the machine's
/// available parallelism.
pub fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("EBADAPT_THREADS") {
            Ok(s) => s
                .trim()
                .parse()
                .map_err(|_| Error::Usage(format!("EBADAPT_THREADS=`{s}` is not a number")))?,
            Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if n == 0 {
        return Err(Error::Usage("thread count must be positive".into()));
    }
    Ok(n)
}
