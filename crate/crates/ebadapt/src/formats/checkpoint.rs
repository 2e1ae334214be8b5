//! Checkpoint file: magic, format version, JSON header, then every tensor
//! as little-endian f32 in header order.

use std::path::Path;

use ebadapt_core::finetune::FinetuneConfig;
use ebadapt_core::model::{LayerSlot, LoraAdapter, LoraSet, Model, ModelConfig, ModelParams, LORA_TARGETS};
use ebadapt_core::numerics::Tensor;
use ebadapt_core::prompt::SchemePair;
use ebadapt_core::tokenizer::SEP;
use serde::{Deserialize, Serialize};

use super::binary::{Reader, Writer};
use super::{read_file, write_file};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EBADCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    /// Token that opens each prompt block.
    pub separator_id: u32,
    /// Settings of the contrastive run that produced this checkpoint.
    pub finetune: Option<FinetuneConfig>,
}

impl Checkpoint {
    pub fn new(model: Model<f32>) -> Self {
        Checkpoint {
            model,
            separator_id: SEP,
            finetune: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct LoraHeader {
    rank: usize,
    scaling: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    separator_id: u32,
    scheme: Option<SchemePair>,
    finetune: Option<FinetuneConfig>,
    lora: Option<LoraHeader>,
    tensors: Vec<TensorEntry>,
}

fn target_name(slot: LayerSlot) -> &'static str {
    match slot {
        LayerSlot::Wq => "wq",
        LayerSlot::Wk => "wk",
        LayerSlot::Wv => "wv",
        LayerSlot::Wo => "wo",
        _ => unreachable!("adapters only on attention projections"),
    }
}

fn lora_entries(cfg: &ModelConfig, rank: usize) -> Vec<TensorEntry> {
    let d = cfg.d_model;
    let mut out = Vec::new();
    for l in 0..cfg.n_layers {
        for &t in &LORA_TARGETS {
            let base = format!("lora.{l}.{}", target_name(t));
            out.push(TensorEntry {
                name: format!("{base}.a"),
                shape: vec![d, rank],
            });
            out.push(TensorEntry {
                name: format!("{base}.b"),
                shape: vec![rank, d],
            });
        }
    }
    out
}

fn expected_entries(cfg: &ModelConfig, lora: Option<usize>) -> Vec<TensorEntry> {
    let mut entries: Vec<TensorEntry> = ModelParams::<f32>::shapes(cfg)
        .into_iter()
        .map(|(name, shape)| TensorEntry { name, shape })
        .collect();
    if let Some(rank) = lora {
        entries.extend(lora_entries(cfg, rank));
    }
    entries
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let m = &ck.model;
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: m.config.clone(),
        separator_id: ck.separator_id,
        scheme: m.scheme,
        finetune: ck.finetune.clone(),
        lora: m.lora.as_ref().map(|l| LoraHeader {
            rank: l.rank,
            scaling: l.scaling,
        }),
        tensors: expected_entries(&m.config, m.lora.as_ref().map(|l| l.rank)),
    };
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.json(&header);
    for t in m.params.tensors() {
        w.f32s(t.data());
    }
    if let Some(l) = &m.lora {
        for ad in &l.adapters {
            w.f32s(ad.a.data());
            w.f32s(ad.b.data());
        }
    }
    w.buf
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(path, bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let header: Header = r.json()?;
    if header.format_version != version {
        return Err(Error::format(path, "header version disagrees with file version"));
    }
    let cfg = header.config;
    cfg.validate().map_err(|e| Error::format(path, e.to_string()))?;
    let expected = expected_entries(&cfg, header.lora.as_ref().map(|l| l.rank));
    if expected.len() != header.tensors.len()
        || expected.iter().zip(&header.tensors).any(|(a, b)| a.name != b.name || a.shape != b.shape)
    {
        return Err(Error::format(path, "tensor table does not match the model config"));
    }
    let mut read = |shape: &[usize]| -> Result<Tensor<f32>> {
        let data = r.f32s(shape.iter().product())?;
        Tensor::new(shape.to_vec(), data).map_err(|e| Error::format(path, e.to_string()))
    };
    let n_base = ModelParams::<f32>::shapes(&cfg).len();
    let mut base = Vec::with_capacity(n_base);
    for e in &header.tensors[..n_base] {
        base.push(read(&e.shape)?);
    }
    let lora = match &header.lora {
        None => None,
        Some(l) => {
            let mut adapters = Vec::new();
            let mut shapes = header.tensors[n_base..].chunks(2);
            for layer in 0..cfg.n_layers {
                for &target in &LORA_TARGETS {
                    let pair = shapes.next().expect("validated table");
                    adapters.push(LoraAdapter {
                        layer,
                        target,
                        a: read(&pair[0].shape)?,
                        b: read(&pair[1].shape)?,
                    });
                }
            }
            Some(LoraSet {
                rank: l.rank,
                scaling: l.scaling,
                adapters,
            })
        }
    };
    r.finish()?;
    let params = ModelParams::from_tensors(&cfg, base).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Checkpoint {
        model: Model {
            config: cfg,
            params,
            lora,
            scheme: header.scheme,
        },
        separator_id: header.separator_id,
        finetune: header.finetune,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_file(path, &encode_checkpoint(ck))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(path, &read_file(path)?)
}
