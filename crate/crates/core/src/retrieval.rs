//! Exact inner-product search over stored document embeddings.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::compression::CompressionDescriptor;
use crate::encode::{embed_batch, resolve_kind};
use crate::error::{shape_err, Error, Result};
use crate::metrics::Run;
use crate::model::Model;
use crate::numerics::{kernels, Scalar};
use crate::prompt::{PromptKind, PromptTokens, Role, SchemePair};

/// Provenance stored with an index.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IndexMeta {
    pub kind: PromptKind,
    pub scheme: SchemePair,
    /// Content hash of the checkpoint that produced the embeddings.
    pub model_checksum: String,
    pub compression: Option<CompressionDescriptor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseIndex {
    meta: IndexMeta,
    dim: usize,
    ids: Vec<String>,
    seen: BTreeSet<String>,
    data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub hits: Vec<(String, f64)>,
    /// Fewer than `k` documents were available.
    pub truncated: bool,
}

impl DenseIndex {
    pub fn new(meta: IndexMeta, dim: usize) -> Self {
        DenseIndex {
            meta,
            dim,
            ids: Vec::new(),
            seen: BTreeSet::new(),
            data: Vec::new(),
        }
    }

    pub fn from_parts(meta: IndexMeta, dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(shape_err("index", alloc::format!("{} values for {} rows of {dim}", data.len(), ids.len())));
        }
        let mut index = DenseIndex::new(meta, dim);
        for (id, row) in ids.into_iter().zip(data.chunks(dim.max(1))) {
            index.push(id, row)?;
        }
        Ok(index)
    }

    pub fn push(&mut self, id: String, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(shape_err("index", alloc::format!("vector of {} for dim {}", v.len(), self.dim)));
        }
        if !self.seen.insert(id.clone()) {
            return Err(Error::DuplicateDoc(id));
        }
        self.ids.push(id);
        self.data.extend_from_slice(v);
        Ok(())
    }

    pub fn meta(&self) -> &IndexMeta {
        &self.meta
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Applies the index's compression, if any, to a full-width embedding.
    pub fn prepare(&self, v: Vec<f32>) -> Result<Vec<f32>> {
        match &self.meta.compression {
            Some(c) => c.apply(&v),
            None => Ok(v),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Top `k` by inner product accumulated in f64; ties by ascending id.
    pub fn search(&self, query: &[f32], k: usize) -> Result<SearchResult> {
        if query.len() != self.dim {
            return Err(shape_err("search", alloc::format!("query of {} for dim {}", query.len(), self.dim)));
        }
        let mut scored: Vec<(usize, f64)> = (0..self.len()).map(|i| (i, kernels::dot_f64(self.row(i), query))).collect();
        let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then_with(|| self.ids[a.0].cmp(&self.ids[b.0]));
        let truncated = k > scored.len();
        if k < scored.len() && k > 0 {
            scored.select_nth_unstable_by(k - 1, order);
        }
        scored.truncate(k);
        scored.sort_by(order);
        Ok(SearchResult {
            hits: scored.into_iter().map(|(i, s)| (self.ids[i].clone(), s)).collect(),
            truncated,
        })
    }
}

pub fn to_f32<F: Scalar>(v: Vec<F>) -> Vec<f32> {
    v.into_iter().map(|x| x.to_f64() as f32).collect()
}

/// Embeds documents under the scheme's document prompt, compressing them
/// when a descriptor is given.
pub fn embed_corpus<F: Scalar>(
    model: &Model<F>,
    prompts: &PromptTokens,
    docs: &[(String, Vec<u32>)],
    scheme: SchemePair,
    compression: Option<CompressionDescriptor>,
    model_checksum: &str,
    batch_size: usize,
) -> Result<DenseIndex> {
    let kind = resolve_kind(model, scheme, Role::Doc)?;
    let texts: Vec<&[u32]> = docs.iter().map(|d| d.1.as_slice()).collect();
    let embs = embed_batch(model, prompts, &texts, kind, batch_size)?;
    let ids = docs.iter().map(|d| d.0.clone()).collect();
    index_from_embeddings(model, ids, embs, scheme, compression, model_checksum)
}

/// Index over document embeddings already computed with the scheme's
/// document prompt.
pub fn index_from_embeddings<F: Scalar>(
    model: &Model<F>,
    ids: Vec<String>,
    embs: Vec<Vec<F>>,
    scheme: SchemePair,
    compression: Option<CompressionDescriptor>,
    model_checksum: &str,
) -> Result<DenseIndex> {
    let kind = resolve_kind(model, scheme, Role::Doc)?;
    if ids.len() != embs.len() {
        return Err(shape_err("index", alloc::format!("{} ids for {} embeddings", ids.len(), embs.len())));
    }
    if let Some(c) = &compression {
        c.validate()?;
        if c.input_dim() != model.config.d_model {
            return Err(shape_err("index", alloc::format!("compression for dim {}", c.input_dim())));
        }
    }
    let dim = compression.as_ref().map_or(model.config.d_model, |c| c.output_dim());
    let mut index = DenseIndex::new(
        IndexMeta {
            kind,
            scheme,
            model_checksum: model_checksum.to_string(),
            compression,
        },
        dim,
    );
    for (id, e) in ids.into_iter().zip(embs) {
        let v = index.prepare(to_f32(e))?;
        index.push(id, &v)?;
    }
    Ok(index)
}

/// Query prompt kind for searching `index` under `scheme`. The scheme must
/// be the one the index was built with and agree with the checkpoint.
pub fn query_kind<F>(model: &Model<F>, index: &DenseIndex, scheme: SchemePair) -> Result<PromptKind> {
    if scheme != index.meta.scheme {
        return Err(Error::SchemeMismatch {
            expected: index.meta.scheme.to_string(),
            requested: scheme.to_string(),
        });
    }
    resolve_kind(model, scheme, Role::Query)
}

/// Ranks the top `k` documents for each pre-computed query embedding.
pub fn run_from_embeddings<F: Scalar>(index: &DenseIndex, query_ids: &[String], embs: Vec<Vec<F>>, k: usize) -> Result<Run> {
    let mut run = Run::new();
    for (qid, e) in query_ids.iter().zip(embs) {
        let v = index.prepare(to_f32(e))?;
        run.insert(qid, index.search(&v, k)?.hits)?;
    }
    Ok(run)
}

/// Embeds queries with the prompt matching `index` and ranks the top `k`.
pub fn search_queries<F: Scalar>(
    model: &Model<F>,
    prompts: &PromptTokens,
    index: &DenseIndex,
    queries: &[(String, Vec<u32>)],
    scheme: SchemePair,
    k: usize,
) -> Result<Run> {
    let kind = query_kind(model, index, scheme)?;
    let texts: Vec<&[u32]> = queries.iter().map(|q| q.1.as_slice()).collect();
    let embs = embed_batch(model, prompts, &texts, kind, 16)?;
    let ids: Vec<String> = queries.iter().map(|q| q.0.clone()).collect();
    run_from_embeddings(index, &ids, embs, k)
}
