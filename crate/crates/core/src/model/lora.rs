//! Low-rank adapters on the attention projections.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::LayerSlot;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const LORA_TARGETS: [LayerSlot; 4] = [LayerSlot::Wq, LayerSlot::Wk, LayerSlot::Wv, LayerSlot::Wo];

/// Factors `A [d×r]`, `B [r×d']` for one target matrix. The effective weight
/// is `base + scaling · A·B`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<F> {
    pub layer: usize,
    pub target: LayerSlot,
    pub a: Tensor<F>,
    pub b: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraSet<F> {
    pub rank: usize,
    pub scaling: f64,
    pub adapters: Vec<LoraAdapter<F>>,
}

impl<F: Scalar> LoraSet<F> {
    /// `A` uniform with variance `1/d`, `B` zero, so the adapted model starts
    /// exactly at the base model.
    pub fn init(cfg: &ModelConfig, rank: usize, scaling: f64, seed: u64) -> Result<Self> {
        let d = cfg.d_model;
        if rank >= d {
            return Err(Error::Config(alloc::format!("LoRA rank {rank} must be < d_model {d}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10_7A);
        let bound = num_traits::Float::sqrt(3.0 / d as f64);
        let mut adapters = Vec::new();
        for layer in 0..cfg.n_layers {
            for &target in &LORA_TARGETS {
                let a = (0..d * rank).map(|_| F::from_f64(rng.gen_range(-bound..bound))).collect();
                adapters.push(LoraAdapter {
                    layer,
                    target,
                    a: Tensor::new(alloc::vec![d, rank], a)?,
                    b: Tensor::zeros(&[rank, d]),
                });
            }
        }
        Ok(LoraSet {
            rank,
            scaling,
            adapters,
        })
    }

    /// Whether the adapters contribute anything to the forward pass.
    pub fn is_active(&self) -> bool {
        self.rank > 0 && self.scaling != 0.0
    }

    pub fn find(&self, layer: usize, target: LayerSlot) -> Option<usize> {
        self.adapters.iter().position(|a| a.layer == layer && a.target == target)
    }

    /// `base + scaling · A·B`.
    pub fn effective_weight(&self, base: &Tensor<F>, idx: usize) -> Result<Tensor<F>> {
        let ad = &self.adapters[idx];
        let delta = ad.a.matmul(&ad.b)?;
        let s = F::from_f64(self.scaling);
        let data = base.data().iter().zip(delta.data()).map(|(&w, &dw)| w + s * dw).collect();
        Tensor::new(base.shape().to_vec(), data)
    }

    pub fn cast<G: Scalar>(&self) -> LoraSet<G> {
        LoraSet {
            rank: self.rank,
            scaling: self.scaling,
            adapters: self
                .adapters
                .iter()
                .map(|a| LoraAdapter {
                    layer: a.layer,
                    target: a.target,
                    a: a.a.cast(),
                    b: a.b.cast(),
                })
                .collect(),
        }
    }
}
