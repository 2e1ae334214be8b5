//! Prompted text embeddings: single-prompt and joint one-pass encodings,
//! eager or recorded on a training graph.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{BoundModel, Embedding, Model, Trainable};
use crate::numerics::{Graph, Scalar, Var};
use crate::prompt::{build_joint, build_mask, build_single, PromptKind, PromptTokens, Role, SchemePair};

/// Prompt kind for `role` under `requested`, refusing a scheme that differs
/// from the one the checkpoint was fine-tuned with.
pub fn resolve_kind<F>(model: &Model<F>, requested: SchemePair, role: Role) -> Result<PromptKind> {
    if let Some(trained) = model.scheme {
        if trained != requested {
            return Err(Error::SchemeMismatch {
                expected: alloc::string::ToString::to_string(&trained),
                requested: alloc::string::ToString::to_string(&requested),
            });
        }
    }
    Ok(requested.kind_for(role))
}

/// Anchor hidden state `[1×d]` of `text` under `kind`, recorded on `g`.
pub fn embed_graph<F: Scalar>(
    model: &Model<F>,
    g: &mut Graph<'_, F>,
    b: &BoundModel,
    prompts: &PromptTokens,
    text: &[u32],
    kind: PromptKind,
) -> Result<Var> {
    let sp = build_single(text, kind, prompts, model.config.max_seq_len)?;
    let h = model.forward_graph(g, b, &sp.seq.tokens, &sp.mask(), &sp.seq.positions)?;
    g.select_rows(h, &[sp.anchor])
}

/// SELF and NEXT anchor rows `[2×d]` from one joint pass, plus the number of
/// input tokens kept after truncation.
pub fn embed_joint_graph<F: Scalar>(
    model: &Model<F>,
    g: &mut Graph<'_, F>,
    b: &BoundModel,
    prompts: &PromptTokens,
    text: &[u32],
) -> Result<(Var, usize)> {
    let jp = build_joint(text, prompts, model.config.max_seq_len)?;
    let mask = build_mask(&jp);
    let h = model.forward_graph(g, b, &jp.seq.tokens, &mask, &jp.seq.positions)?;
    let rows = g.select_rows(h, &[jp.alpha_anchor, jp.beta_anchor])?;
    Ok((rows, jp.input_len()))
}

pub fn embed_text<F: Scalar>(model: &Model<F>, prompts: &PromptTokens, text: &[u32], kind: PromptKind) -> Result<Embedding<F>> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, Trainable::NONE);
    let v = embed_graph(model, &mut g, &b, prompts, text, kind)?;
    Ok(Embedding {
        values: g.value(v).data().to_vec(),
        kind,
    })
}

/// `(SELF, NEXT)` embeddings from a single joint pass.
pub fn embed_joint<F: Scalar>(model: &Model<F>, prompts: &PromptTokens, text: &[u32]) -> Result<(Embedding<F>, Embedding<F>)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, Trainable::NONE);
    let (rows, _) = embed_joint_graph(model, &mut g, &b, prompts, text)?;
    let t = g.value(rows);
    Ok((
        Embedding {
            values: t.row(0).to_vec(),
            kind: PromptKind::SelfText,
        },
        Embedding {
            values: t.row(1).to_vec(),
            kind: PromptKind::NextText,
        },
    ))
}

/// Embeds `texts` in chunks of `batch_size` sharing one graph per chunk.
/// Results do not depend on the chunking.
pub fn embed_batch<F: Scalar>(
    model: &Model<F>,
    prompts: &PromptTokens,
    texts: &[&[u32]],
    kind: PromptKind,
    batch_size: usize,
) -> Result<Vec<Vec<F>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(batch_size) {
        let mut g = Graph::new();
        let b = model.bind(&mut g, Trainable::NONE);
        for text in chunk {
            let v = embed_graph(model, &mut g, &b, prompts, text, kind)?;
            out.push(g.value(v).data().to_vec());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use alloc::vec;

    fn tiny() -> (Model<f64>, PromptTokens) {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 40,
            max_seq_len: 32,
            ..ModelConfig::default()
        };
        let prompts = PromptTokens {
            self_prompt: vec![3, 10, 11],
            next_prompt: vec![3, 12, 13, 14],
            anchor: 2,
        };
        (Model::init(cfg, 5).unwrap(), prompts)
    }

    #[test]
    fn joint_matches_two_single_passes() {
        let (m, p) = tiny();
        let text = [20, 21, 22, 23, 24];
        let (a, b) = embed_joint(&m, &p, &text).unwrap();
        assert_eq!(a, embed_text(&m, &p, &text, PromptKind::SelfText).unwrap());
        assert_eq!(b, embed_text(&m, &p, &text, PromptKind::NextText).unwrap());
    }

    #[test]
    fn batching_does_not_change_embeddings() {
        let (m, p) = tiny();
        let texts: Vec<Vec<u32>> = (0..5).map(|i| (20..22 + i).collect()).collect();
        let refs: Vec<&[u32]> = texts.iter().map(|t| t.as_slice()).collect();
        let one = embed_batch(&m, &p, &refs, PromptKind::SelfText, 1).unwrap();
        let many = embed_batch(&m, &p, &refs, PromptKind::SelfText, 3).unwrap();
        assert_eq!(one, many);
        assert!(embed_batch(&m, &p, &refs, PromptKind::SelfText, 0).is_err());
    }

    #[test]
    fn scheme_mismatch_is_refused() {
        let (mut m, _) = tiny();
        assert_eq!(resolve_kind(&m, SchemePair::S2S, Role::Query).unwrap(), PromptKind::SelfText);
        m.scheme = Some(SchemePair::N2S);
        assert_eq!(resolve_kind(&m, SchemePair::N2S, Role::Query).unwrap(), PromptKind::NextText);
        assert!(matches!(
            resolve_kind(&m, SchemePair::S2S, Role::Doc),
            Err(Error::SchemeMismatch { .. })
        ));
    }
}
