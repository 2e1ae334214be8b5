use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::{shape_err, Result};
use crate::numerics::{Scalar, Tensor};

pub(crate) const PER_LAYER: usize = 9;

/// Index of a tensor inside [`ModelParams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Per-layer weight slots, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSlot {
    AttnNorm = 0,
    Wq = 1,
    Wk = 2,
    Wv = 3,
    Wo = 4,
    FfnNorm = 5,
    W1 = 6,
    W3 = 7,
    W2 = 8,
}

const SLOT_NAMES: [&str; PER_LAYER] = ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w1", "w3", "w2"];

/// All base weights of the transformer as a flat list of tensors:
/// token table, `n_layers × 9` block tensors, final norm, and the
/// projection head when untied.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    n_layers: usize,
    tied: bool,
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> ModelParams<F> {
    pub fn shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let mut out = Vec::new();
        out.push((String::from("tok_emb"), alloc::vec![v, d]));
        for l in 0..cfg.n_layers {
            let shapes = [
                alloc::vec![d],
                alloc::vec![d, d],
                alloc::vec![d, d],
                alloc::vec![d, d],
                alloc::vec![d, d],
                alloc::vec![d],
                alloc::vec![d, ff],
                alloc::vec![d, ff],
                alloc::vec![ff, d],
            ];
            for (name, shape) in SLOT_NAMES.iter().zip(shapes) {
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.push((String::from("final_norm"), alloc::vec![d]));
        if !cfg.tie_head {
            out.push((String::from("head"), alloc::vec![d, v]));
        }
        out
    }

    /// Seeded uniform initialization with variance `1/fan_in`; residual
    /// output projections are further scaled by `1/sqrt(2·n_layers)`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual = 1.0 / num_traits::Float::sqrt(2.0 * cfg.n_layers as f64);
        let mut tensors = Vec::new();
        for (name, shape) in Self::shapes(cfg) {
            let n: usize = shape.iter().product();
            let std = if name.ends_with("norm") {
                None
            } else if name == "tok_emb" {
                Some(1.0)
            } else {
                let fan_in = shape[0] as f64;
                let mut s = 1.0 / num_traits::Float::sqrt(fan_in);
                if name.ends_with(".wo") || name.ends_with(".w2") {
                    s *= residual;
                }
                Some(s)
            };
            let data = match std {
                None => alloc::vec![F::one(); n],
                Some(s) => {
                    let a = s * num_traits::Float::sqrt(3.0);
                    (0..n).map(|_| F::from_f64(rng.gen_range(-a..a))).collect()
                }
            };
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(ModelParams {
            n_layers: cfg.n_layers,
            tied: cfg.tie_head,
            tensors,
        })
    }

    /// Rebuilds from named tensors in [`ModelParams::shapes`] order.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor<F>>) -> Result<Self> {
        let expected = Self::shapes(cfg);
        if expected.len() != tensors.len() {
            return Err(shape_err("model_params", format!("{} tensors, expected {}", tensors.len(), expected.len())));
        }
        for ((name, shape), t) in expected.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(shape_err("model_params", format!("{name}: {:?} vs {:?}", t.shape(), shape)));
            }
        }
        Ok(ModelParams {
            n_layers: cfg.n_layers,
            tied: cfg.tie_head,
            tensors,
        })
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn tok_emb(&self) -> ParamId {
        ParamId(0)
    }

    pub fn layer(&self, l: usize, slot: LayerSlot) -> ParamId {
        ParamId(1 + l * PER_LAYER + slot as usize)
    }

    pub fn final_norm(&self) -> ParamId {
        ParamId(1 + self.n_layers * PER_LAYER)
    }

    /// `None` when decoding through the tied token table.
    pub fn head(&self) -> Option<ParamId> {
        (!self.tied).then(|| ParamId(2 + self.n_layers * PER_LAYER))
    }

    pub fn is_head(&self, id: ParamId) -> bool {
        self.head() == Some(id)
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            n_layers: self.n_layers,
            tied: self.tied,
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}
