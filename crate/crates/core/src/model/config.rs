use alloc::format;

use crate::error::{Error, Result};

/// Decoder-only transformer hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub bos_id: u32,
    /// Also the `⟨s⟩` anchor token of prompted embeddings.
    pub eos_id: u32,
    pub pad_id: u32,
    /// Decode through the transposed token table instead of a separate head.
    pub tie_head: bool,
}

impl Default for ModelConfig {
    /// Toy scale.
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size: 1024,
            max_seq_len: 256,
            rope_base: 10000.0,
            norm_eps: 1e-6,
            bos_id: 1,
            eos_id: 2,
            pad_id: 0,
            tie_head: false,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad(format!("zero-sized model: {:?}", self));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!("head_dim {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive".into());
        }
        let ids = [self.bos_id, self.eos_id, self.pad_id];
        if ids.iter().any(|&id| id as usize >= self.vocab_size) {
            return bad(format!("special ids {:?} must be < vocab_size {}", ids, self.vocab_size));
        }
        if ids[0] == ids[1] || ids[0] == ids[2] || ids[1] == ids[2] {
            return bad(format!("special ids {:?} must be distinct", ids));
        }
        if !(self.rope_base > 0.0) || !(self.norm_eps > 0.0) {
            return bad("rope_base and norm_eps must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads_and_clashing_specials() {
        let c = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            pad_id: 2,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            bos_id: 5000,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
