//! Decoder-only transformer: pre-norm residual blocks with RMS norm, rotary
//! positions taken from explicit position ids, SwiGLU feed-forward, and an
//! untied (by default) projection head onto the vocabulary.

mod config;
mod lora;
mod params;

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

pub use config::ModelConfig;
pub use lora::{LoraAdapter, LoraSet, LORA_TARGETS};
pub use params::{LayerSlot, ModelParams, ParamId};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{AttentionMask, Graph, Scalar, Tensor, Var};
use crate::prompt::{PromptKind, SchemePair};

/// Text embedding: a hidden state read at an anchor, tagged with the prompt
/// that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<F> {
    pub values: Vec<F>,
    pub kind: PromptKind,
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    /// Every base tensor except the projection head.
    pub base: bool,
    pub head: bool,
    pub lora: bool,
}

impl Trainable {
    pub const ALL_BASE: Trainable = Trainable {
        base: true,
        head: true,
        lora: false,
    };
    pub const NONE: Trainable = Trainable {
        base: false,
        head: false,
        lora: false,
    };
}

/// Graph handles for every model tensor.
pub struct BoundModel {
    pub params: Vec<Var>,
    pub lora: Vec<(Var, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ModelParams<F>,
    pub lora: Option<LoraSet<F>>,
    /// Prompt scheme the model was contrastively fine-tuned with, if any.
    pub scheme: Option<SchemePair>,
}

impl<F: Scalar> Model<F> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Model {
            config,
            params,
            lora: None,
            scheme: None,
        })
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            lora: self.lora.as_ref().map(|l| l.cast()),
            scheme: self.scheme,
        }
    }

    /// Base model with adapters dropped.
    pub fn without_lora(&self) -> Model<F> {
        Model {
            lora: None,
            ..self.clone()
        }
    }

    /// Folds active adapters into the base weights.
    pub fn merge_lora(&self) -> Result<Model<F>> {
        let mut out = self.without_lora();
        if let Some(l) = &self.lora {
            for (idx, ad) in l.adapters.iter().enumerate() {
                let id = out.params.layer(ad.layer, ad.target);
                let w = l.effective_weight(self.params.get(id), idx)?;
                *out.params.get_mut(id) = w;
            }
        }
        Ok(out)
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a, F>, trainable: Trainable) -> BoundModel {
        let params = self
            .params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let train = if self.params.is_head(ParamId(i)) {
                    trainable.head
                } else {
                    trainable.base
                };
                if train {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        let lora = match &self.lora {
            Some(l) => l
                .adapters
                .iter()
                .map(|ad| {
                    if trainable.lora {
                        (g.param(&ad.a), g.param(&ad.b))
                    } else {
                        (g.constant(&ad.a), g.constant(&ad.b))
                    }
                })
                .collect(),
            None => Vec::new(),
        };
        BoundModel { params, lora }
    }

    fn project(&self, g: &mut Graph<'_, F>, b: &BoundModel, x: Var, layer: usize, slot: LayerSlot) -> Result<Var> {
        let w = b.params[self.params.layer(layer, slot).0];
        let y = g.matmul(x, w)?;
        let Some(l) = self.lora.as_ref().filter(|l| l.is_active()) else {
            return Ok(y);
        };
        let Some(idx) = l.find(layer, slot) else {
            return Ok(y);
        };
        let (a, bb) = b.lora[idx];
        let xa = g.matmul(x, a)?;
        let xab = g.matmul(xa, bb)?;
        let delta = g.scale(xab, F::from_f64(l.scaling))?;
        g.add(y, delta)
    }

    /// Hidden states `[L×d]` after the final norm.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_, F>,
        b: &BoundModel,
        tokens: &[u32],
        mask: &AttentionMask,
        positions: &[u32],
    ) -> Result<Var> {
        let cfg = &self.config;
        let l = tokens.len();
        if l == 0 {
            return Err(Error::EmptyInput);
        }
        if l > cfg.max_seq_len {
            return Err(Error::Overlength {
                len: l,
                max: cfg.max_seq_len,
            });
        }
        if positions.len() != l || mask.len() != l {
            return Err(shape_err(
                "forward",
                format!("{} tokens, {} positions, mask {}", l, positions.len(), mask.len()),
            ));
        }
        let rows = Rc::new(mask.visible_rows()?);
        let eps = F::from_f64(cfg.norm_eps);
        let hd = cfg.head_dim();
        let mut x = g.embedding(b.params[self.params.tok_emb().0], tokens)?;
        for layer in 0..cfg.n_layers {
            let p = |s: LayerSlot| b.params[self.params.layer(layer, s).0];
            let h = g.rms_norm(x, p(LayerSlot::AttnNorm), eps)?;
            let q = self.project(g, b, h, layer, LayerSlot::Wq)?;
            let k = self.project(g, b, h, layer, LayerSlot::Wk)?;
            let v = self.project(g, b, h, layer, LayerSlot::Wv)?;
            let q = g.rope(q, positions, hd, cfg.rope_base)?;
            let k = g.rope(k, positions, hd, cfg.rope_base)?;
            let a = g.masked_attention(q, k, v, &rows, cfg.n_heads)?;
            let o = self.project(g, b, a, layer, LayerSlot::Wo)?;
            x = g.add(x, o)?;
            let h = g.rms_norm(x, p(LayerSlot::FfnNorm), eps)?;
            let gate = g.matmul(h, p(LayerSlot::W1))?;
            let gate = g.silu(gate)?;
            let up = g.matmul(h, p(LayerSlot::W3))?;
            let act = g.mul(gate, up)?;
            let down = g.matmul(act, p(LayerSlot::W2))?;
            x = g.add(x, down)?;
        }
        g.rms_norm(x, b.params[self.params.final_norm().0], eps)
    }

    /// Vocabulary logits `hidden · W` for the rows of `hidden`.
    pub fn logits_graph(&self, g: &mut Graph<'_, F>, b: &BoundModel, hidden: Var) -> Result<Var> {
        match self.params.head() {
            Some(h) => g.matmul(hidden, b.params[h.0]),
            None => {
                let t = g.transpose(b.params[self.params.tok_emb().0])?;
                g.matmul(hidden, t)
            }
        }
    }

    /// Eager forward pass without gradient tracking.
    pub fn forward(&self, tokens: &[u32], mask: &AttentionMask, positions: &[u32]) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, Trainable::NONE);
        let h = self.forward_graph(&mut g, &b, tokens, mask, positions)?;
        Ok(g.value(h).clone())
    }

    /// Eager `hidden · W`.
    pub fn logits(&self, hidden: &Tensor<F>) -> Result<Tensor<F>> {
        match self.params.head() {
            Some(h) => hidden.matmul(self.params.get(h)),
            None => hidden.matmul(&self.params.get(self.params.tok_emb()).transpose()),
        }
    }
}

/// Hidden state at the anchor position.
pub fn extract_embedding<F: Scalar>(hidden: &Tensor<F>, anchor: usize, kind: PromptKind) -> Result<Embedding<F>> {
    if anchor >= hidden.rows() {
        return Err(Error::OutOfRange {
            index: anchor,
            len: hidden.rows(),
        });
    }
    Ok(Embedding {
        values: hidden.row(anchor).to_vec(),
        kind,
    })
}

/// Arithmetic mean of the first `valid_len` hidden rows.
pub fn mean_pool<F: Scalar>(hidden: &Tensor<F>, valid_len: usize) -> Result<Embedding<F>> {
    if valid_len == 0 || valid_len > hidden.rows() {
        return Err(Error::OutOfRange {
            index: valid_len,
            len: hidden.rows(),
        });
    }
    let d = hidden.cols();
    let mut acc = alloc::vec![F::zero(); d];
    for i in 0..valid_len {
        for (a, &x) in acc.iter_mut().zip(hidden.row(i)) {
            *a = *a + x;
        }
    }
    let n = F::from_f64(valid_len as f64);
    Ok(Embedding {
        values: acc.into_iter().map(|x| x / n).collect(),
        kind: PromptKind::Plain,
    })
}

#[cfg(test)]
mod tests;
