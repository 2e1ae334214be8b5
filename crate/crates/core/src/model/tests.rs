use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::prompt::{build_joint, build_mask};

fn micro() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: 32,
        max_seq_len: 24,
        ..ModelConfig::default()
    }
}

#[test]
fn bos_only_forward() {
    let m = Model::<f32>::init(micro(), 1).unwrap();
    let h = m.forward(&[m.config.bos_id], &AttentionMask::causal(1), &[0]).unwrap();
    assert_eq!(h.shape(), &[1, 8]);
    assert!(h.is_finite());
}

#[test]
fn overlength_and_bad_positions_are_errors() {
    let m = Model::<f32>::init(micro(), 1).unwrap();
    let toks = vec![3u32; 25];
    let pos: Vec<u32> = (0..25).collect();
    assert!(matches!(
        m.forward(&toks, &AttentionMask::causal(25), &pos),
        Err(Error::Overlength { len: 25, max: 24 })
    ));
    assert!(m.forward(&[3, 4], &AttentionMask::causal(2), &[0]).is_err());
    assert!(matches!(
        m.forward(&[99], &AttentionMask::causal(1), &[0]),
        Err(Error::TokenOutOfVocab { .. })
    ));
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let m = Model::<f32>::init(micro(), 5).unwrap();
    let toks = [4, 9, 11, 2];
    let a = m.forward(&toks, &AttentionMask::causal(4), &[0, 1, 2, 3]).unwrap();
    let m2 = Model::<f32>::init(micro(), 5).unwrap();
    let b = m2.forward(&toks, &AttentionMask::causal(4), &[0, 1, 2, 3]).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn masks_differing_only_between_blocks_leave_visible_rows_unchanged() {
    let pr = crate::prompt::PromptTokens {
        self_prompt: vec![20, 21],
        next_prompt: vec![22, 23],
        anchor: 2,
    };
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Model::<f32>::init(micro(), seed).unwrap();
        let n = rng.gen_range(1..8);
        let text: Vec<u32> = (0..n).map(|_| rng.gen_range(5..20)).collect();
        let jp = build_joint(&text, &pr, 24).unwrap();
        let mask = build_mask(&jp);
        // Open one cross-block entry: only the NEXT rows at or after it change.
        let mut leaky = mask.clone();
        leaky.set(jp.beta_anchor, jp.alpha_anchor, true);
        let a = m.forward(&jp.seq.tokens, &mask, &jp.seq.positions).unwrap();
        let b = m.forward(&jp.seq.tokens, &leaky, &jp.seq.positions).unwrap();
        for i in 0..jp.seq.len() {
            if i != jp.beta_anchor {
                assert_eq!(a.row(i), b.row(i), "row {i}");
            }
        }
        assert_ne!(a.row(jp.beta_anchor), b.row(jp.beta_anchor));
    }
}

#[test]
fn logits_rows_softmax_to_one() {
    let m = Model::<f64>::init(micro(), 3).unwrap();
    let h = m.forward(&[5, 6, 7], &AttentionMask::causal(3), &[0, 1, 2]).unwrap();
    let z = m.logits(&h).unwrap();
    assert_eq!(z.shape(), &[3, 32]);
    for i in 0..3 {
        let mx = z.row(i).iter().cloned().fold(f64::MIN, f64::max);
        let s: f64 = z.row(i).iter().map(|x| (x - mx).exp()).sum();
        let p: f64 = z.row(i).iter().map(|x| (x - mx).exp() / s).sum();
        assert!((p - 1.0).abs() < 1e-6);
    }
}

#[test]
fn tied_head_decodes_through_token_table() {
    let cfg = ModelConfig {
        tie_head: true,
        ..micro()
    };
    let m = Model::<f64>::init(cfg, 3).unwrap();
    assert!(m.params.head().is_none());
    let h = m.forward(&[5, 6], &AttentionMask::causal(2), &[0, 1]).unwrap();
    let z = m.logits(&h).unwrap();
    let emb = m.params.get(m.params.tok_emb());
    let expect: f64 = h.row(1).iter().zip(emb.row(9)).map(|(a, b)| a * b).sum();
    assert!((z.row(1)[9] - expect).abs() < 1e-12);
}

#[test]
fn extract_and_mean_pool() {
    let h = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 1.0]]).unwrap();
    let e = extract_embedding(&h, 1, PromptKind::SelfText).unwrap();
    assert_eq!(e.values, vec![3.0, 6.0]);
    assert_ne!(extract_embedding(&h, 0, PromptKind::SelfText).unwrap().values, e.values);
    assert!(extract_embedding(&h, 3, PromptKind::SelfText).is_err());
    assert_eq!(mean_pool(&h, 1).unwrap().values, vec![1.0, 2.0]);
    assert_eq!(mean_pool(&h, 2).unwrap().values, vec![2.0, 4.0]);
    let same = Tensor::<f64>::from_rows(&[vec![0.5, -1.0], vec![0.5, -1.0]]).unwrap();
    assert_eq!(mean_pool(&same, 2).unwrap().values, vec![0.5, -1.0]);
}

#[test]
fn mean_pool_matches_direct_recompute() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (r, c) = (rng.gen_range(1..9), rng.gen_range(1..6));
        let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let h = Tensor::new(vec![r, c], data.clone()).unwrap();
        let n = rng.gen_range(1..=r);
        let got = mean_pool(&h, n).unwrap().values;
        for j in 0..c {
            let oracle = (0..n).map(|i| data[i * c + j]).sum::<f64>() / n as f64;
            assert!((got[j] - oracle).abs() < 1e-12);
        }
    }
}

#[test]
fn inactive_lora_is_bit_identical_to_base() {
    let base = Model::<f32>::init(micro(), 2).unwrap();
    let toks = [4, 5, 6, 2];
    let mask = AttentionMask::causal(4);
    let pos = [0, 1, 2, 3];
    let reference = base.forward(&toks, &mask, &pos).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (rank, scaling) in [(0usize, 1.0), (2, 0.0)] {
        let mut m = base.clone();
        let mut l = LoraSet::init(&m.config, rank, scaling, 9).unwrap();
        for ad in &mut l.adapters {
            for x in ad.b.data_mut() {
                *x = rng.gen_range(-1.0..1.0);
            }
        }
        m.lora = Some(l);
        assert_eq!(m.forward(&toks, &mask, &pos).unwrap(), reference);
    }
}

#[test]
fn merged_lora_matches_adapter_forward_and_disable_recovers_base() {
    let base = Model::<f64>::init(micro(), 2).unwrap();
    let mut m = base.clone();
    let mut l = LoraSet::init(&m.config, 2, 0.5, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for ad in &mut l.adapters {
        for x in ad.b.data_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
    }
    m.lora = Some(l);
    let toks = [4, 5, 6];
    let mask = AttentionMask::causal(3);
    let a = m.forward(&toks, &mask, &[0, 1, 2]).unwrap();
    let b = m.merge_lora().unwrap().forward(&toks, &mask, &[0, 1, 2]).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-10);
    }
    assert_eq!(m.without_lora().params, base.params);
    assert_ne!(a, base.forward(&toks, &mask, &[0, 1, 2]).unwrap());
}
