//! Embedding compression: top-magnitude sparsification and learned linear
//! projections to fewer dimensions.

use alloc::vec;
use alloc::vec::Vec;

use crate::encode::embed_batch;
use crate::error::{shape_err, Error, Result};
use crate::model::Model;
use crate::numerics::{kernels, Graph, Scalar, Tensor};
use crate::prompt::{PromptTokens, SchemePair};

/// How stored and query embeddings are transformed before scoring.
/// Projections are `[dim × target_dim]`, row-major.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "variant", rename_all = "kebab-case"))]
pub enum CompressionDescriptor {
    Sparse {
        dim: usize,
        keep: usize,
    },
    DimRed {
        dim: usize,
        target_dim: usize,
        projection: Vec<f32>,
    },
    DimRedDistilled {
        dim: usize,
        target_dim: usize,
        projection: Vec<f32>,
    },
}

impl CompressionDescriptor {
    pub fn sparse(dim: usize, keep: usize) -> Result<Self> {
        let d = CompressionDescriptor::Sparse { dim, keep };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CompressionDescriptor::Sparse { dim, keep } => {
                if *keep == 0 || keep > dim {
                    return Err(Error::Config(alloc::format!("sparse keep {keep} must be in 1..={dim}")));
                }
            }
            CompressionDescriptor::DimRed {
                dim,
                target_dim,
                projection,
            }
            | CompressionDescriptor::DimRedDistilled {
                dim,
                target_dim,
                projection,
            } => {
                if *target_dim == 0 || target_dim > dim {
                    return Err(Error::Config(alloc::format!("target dim {target_dim} must be in 1..={dim}")));
                }
                if projection.len() != dim * target_dim {
                    return Err(shape_err("compression", alloc::format!("projection has {} entries", projection.len())));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self {
            CompressionDescriptor::Sparse { dim, .. }
            | CompressionDescriptor::DimRed { dim, .. }
            | CompressionDescriptor::DimRedDistilled { dim, .. } => *dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            CompressionDescriptor::Sparse { dim, .. } => *dim,
            CompressionDescriptor::DimRed { target_dim, .. } | CompressionDescriptor::DimRedDistilled { target_dim, .. } => {
                *target_dim
            }
        }
    }

    pub fn apply(&self, v: &[f32]) -> Result<Vec<f32>> {
        if v.len() != self.input_dim() {
            return Err(shape_err("compression", alloc::format!("vector of {} for dim {}", v.len(), self.input_dim())));
        }
        match self {
            CompressionDescriptor::Sparse { keep, .. } => sparsify(v, *keep),
            CompressionDescriptor::DimRed {
                dim,
                target_dim,
                projection,
            }
            | CompressionDescriptor::DimRedDistilled {
                dim,
                target_dim,
                projection,
            } => Ok(kernels::matmul(v, projection, 1, *dim, *target_dim)),
        }
    }
}

/// Keeps the `keep` largest-magnitude entries (lower index wins ties) and
/// zeroes the rest.
pub fn sparsify(v: &[f32], keep: usize) -> Result<Vec<f32>> {
    if keep == 0 {
        return Err(Error::Config("sparse keep must be positive".into()));
    }
    if keep >= v.len() {
        return Ok(v.to_vec());
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; v.len()];
    for &i in &order[..keep] {
        out[i] = v[i];
    }
    Ok(out)
}

/// Storage form of a vector: `(index, value)` pairs when at most a quarter
/// of the entries are non-zero, dense otherwise.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredVector {
    Dense(Vec<f32>),
    Sparse { dim: usize, entries: Vec<(u32, f32)> },
}

impl StoredVector {
    pub fn encode(v: &[f32]) -> StoredVector {
        let nnz = v.iter().filter(|x| **x != 0.0).count();
        if nnz <= v.len() / 4 {
            StoredVector::Sparse {
                dim: v.len(),
                entries: v
                    .iter()
                    .enumerate()
                    .filter(|(_, x)| **x != 0.0)
                    .map(|(i, &x)| (i as u32, x))
                    .collect(),
            }
        } else {
            StoredVector::Dense(v.to_vec())
        }
    }

    pub fn to_dense(&self) -> Vec<f32> {
        match self {
            StoredVector::Dense(v) => v.clone(),
            StoredVector::Sparse { dim, entries } => {
                let mut out = vec![0.0; *dim];
                for &(i, x) in entries {
                    out[i as usize] = x;
                }
                out
            }
        }
    }

    /// Inner product with `q`, accumulated in f64 in ascending index order.
    pub fn dot(&self, q: &[f32]) -> f64 {
        match self {
            StoredVector::Dense(v) => kernels::dot_f64(v, q),
            StoredVector::Sparse { entries, .. } => {
                let mut s = 0.0;
                for &(i, x) in entries {
                    s += x as f64 * q[i as usize] as f64;
                }
                s
            }
        }
    }
}

/// `[dim × target_dim]` with ones on the leading diagonal.
pub fn truncated_identity<F: Scalar>(dim: usize, target_dim: usize) -> Tensor<F> {
    let mut t = Tensor::zeros(&[dim, target_dim]);
    for i in 0..dim.min(target_dim) {
        t.data_mut()[i * target_dim + i] = F::one();
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct DistillConfig {
    pub steps: usize,
    /// Initial step size; adapted by backtracking.
    pub learning_rate: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: 200,
            learning_rate: 1e-3,
        }
    }
}

fn distill_loss(q: &Tensor<f64>, d: &Tensor<f64>, p: &Tensor<f64>, teacher: &[f64], grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    let mut g = Graph::new();
    let qv = g.constant(q);
    let dv = g.constant(d);
    let pv = g.param(p);
    let qp = g.matmul(qv, pv)?;
    let dp = g.matmul(dv, pv)?;
    let dpt = g.transpose(dp)?;
    let s = g.matmul(qp, dpt)?;
    let loss = g.mse(s, teacher)?;
    let value = g.value(loss).data()[0];
    if !grad {
        return Ok((value, None));
    }
    let mut grads = g.backward(loss)?;
    Ok((value, grads.take(pv)))
}

/// Fits a projection on a frozen model so projected query·doc inner
/// products match the full-dimension ones in mean squared error. Full-batch
/// gradient descent with backtracking, so the returned loss curve never
/// increases.
pub fn distill_dimred<F: Scalar>(
    model: &Model<F>,
    prompts: &PromptTokens,
    scheme: SchemePair,
    queries: &[&[u32]],
    docs: &[&[u32]],
    target_dim: usize,
    cfg: &DistillConfig,
) -> Result<(CompressionDescriptor, Vec<f64>)> {
    let dim = model.config.d_model;
    if target_dim == 0 || target_dim > dim {
        return Err(Error::Config(alloc::format!("target dim {target_dim} must be in 1..={dim}")));
    }
    if queries.is_empty() || docs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let to_tensor = |rows: Vec<Vec<F>>| -> Result<Tensor<f64>> {
        let n = rows.len();
        Tensor::new(vec![n, dim], rows.into_iter().flatten().map(|x| x.to_f64()).collect())
    };
    let q = to_tensor(embed_batch(model, prompts, queries, scheme.query_kind(), 16)?)?;
    let d = to_tensor(embed_batch(model, prompts, docs, scheme.doc_kind(), 16)?)?;
    let teacher = q.matmul(&d.transpose())?.into_data();
    let mut p: Tensor<f64> = truncated_identity(dim, target_dim);
    let (mut loss, _) = distill_loss(&q, &d, &p, &teacher, false)?;
    let mut curve = vec![loss];
    let mut lr = cfg.learning_rate;
    for _ in 0..cfg.steps {
        let (_, grad) = distill_loss(&q, &d, &p, &teacher, true)?;
        let grad = grad.unwrap_or_else(|| vec![0.0; p.len()]);
        let mut accepted = false;
        for _ in 0..40 {
            let mut trial = p.clone();
            for (w, g) in trial.data_mut().iter_mut().zip(&grad) {
                *w -= lr * g;
            }
            match distill_loss(&q, &d, &trial, &teacher, false) {
                Ok((l, _)) if l <= loss => {
                    p = trial;
                    loss = l;
                    accepted = true;
                    lr *= 1.5;
                    break;
                }
                _ => lr *= 0.5,
            }
        }
        curve.push(loss);
        if !accepted {
            break;
        }
    }
    let desc = CompressionDescriptor::DimRedDistilled {
        dim,
        target_dim,
        projection: p.data().iter().map(|&x| x as f32).collect(),
    };
    Ok((desc, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn sparsify_keeps_top_magnitudes() {
        assert_eq!(sparsify(&[0.1, -3.0, 2.0, 0.5], 2).unwrap(), vec![0.0, -3.0, 2.0, 0.0]);
    }

    #[test]
    fn sparsify_ties_prefer_lower_index() {
        assert_eq!(sparsify(&[1.0, -1.0, 1.0], 2).unwrap(), vec![1.0, -1.0, 0.0]);
        assert!(sparsify(&[1.0], 0).is_err());
    }

    #[test]
    fn sparsify_at_full_width_is_identity() {
        let v = [0.3, -0.2, 0.0];
        assert_eq!(sparsify(&v, 3).unwrap(), v.to_vec());
        assert_eq!(sparsify(&v, 9).unwrap(), v.to_vec());
    }

    #[test]
    fn stored_vector_picks_representation_and_round_trips() {
        let v = [0.0, 0.0, 2.5, 0.0, 0.0, 0.0, 0.0, 0.0];
        let s = StoredVector::encode(&v);
        assert!(matches!(s, StoredVector::Sparse { .. }));
        assert_eq!(s.to_dense(), v.to_vec());
        let q = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        assert_eq!(s.dot(&q), StoredVector::Dense(v.to_vec()).dot(&q));
        assert!(matches!(StoredVector::encode(&q), StoredVector::Dense(_)));
    }

    #[test]
    fn identity_projection_is_exact() {
        let desc = CompressionDescriptor::DimRed {
            dim: 3,
            target_dim: 3,
            projection: truncated_identity::<f32>(3, 3).into_data(),
        };
        let v = [0.25f32, -1.5, 3.0e-7];
        assert_eq!(desc.apply(&v).unwrap(), v.to_vec());
        assert!(desc.apply(&[1.0]).is_err());
    }

    #[test]
    fn descriptor_validation() {
        assert!(CompressionDescriptor::sparse(8, 0).is_err());
        assert!(CompressionDescriptor::sparse(8, 9).is_err());
        let bad = CompressionDescriptor::DimRed {
            dim: 4,
            target_dim: 2,
            projection: vec![0.0; 7],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn distillation_loss_never_increases() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 30,
            max_seq_len: 16,
            ..ModelConfig::default()
        };
        let model: Model<f32> = Model::init(cfg, 3).unwrap();
        let prompts = PromptTokens {
            self_prompt: vec![3, 5],
            next_prompt: vec![3, 6],
            anchor: 2,
        };
        let texts: Vec<Vec<u32>> = (0..6).map(|i| vec![10 + i, 20 + i, 7]).collect();
        let refs: Vec<&[u32]> = texts.iter().map(|t| t.as_slice()).collect();
        let before = model.clone();
        let (desc, curve) = distill_dimred(&model, &prompts, SchemePair::N2S, &refs, &refs, 3, &DistillConfig::default()).unwrap();
        assert_eq!(model, before);
        assert_eq!(desc.output_dim(), 3);
        assert!(curve.windows(2).all(|w| w[1] <= w[0]));
        assert!(curve.last().unwrap() < &curve[0]);
        assert!(distill_dimred(&model, &prompts, SchemePair::N2S, &refs, &refs, 9, &DistillConfig::default()).is_err());
    }
}
