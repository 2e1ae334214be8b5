use super::*;
use crate::encode::embed_text;
use crate::model::ModelConfig;
use alloc::string::ToString;
use alloc::vec;

fn micro_cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 12,
        vocab_size: 40,
        max_seq_len: 24,
        ..ModelConfig::default()
    }
}

fn prompts() -> PromptTokens {
    PromptTokens {
        self_prompt: vec![3, 5],
        next_prompt: vec![3, 6],
        anchor: 2,
    }
}

fn pair(i: u32, negs: &[u32]) -> TrainPair {
    TrainPair {
        query_id: alloc::format!("q{i}"),
        query: vec![10 + i, 7],
        positive_id: alloc::format!("d{i}"),
        positive: vec![10 + i, 20 + i, 8],
        negatives: negs.iter().map(|&j| (alloc::format!("d{j}"), vec![10 + j, 20 + j, 8])).collect(),
    }
}

fn pairs() -> Vec<TrainPair> {
    (0..6).map(|i| pair(i, &[(i + 1) % 6])).collect()
}

#[test]
fn hand_computed_loss() {
    let q = Tensor::new(vec![1, 2], vec![1.0f64, 0.0]).unwrap();
    let d = Tensor::new(vec![2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
    let l = contrastive_loss(&q, &d, &["a", "b"], &[0], 1.0).unwrap();
    assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
    let l2 = contrastive_loss(&q, &d, &["a", "b"], &[0], 0.5).unwrap();
    assert!((l2 - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-15);
}

#[test]
fn repeated_doc_ids_are_an_error() {
    let q = Tensor::new(vec![1, 2], vec![1.0f64, 0.0]).unwrap();
    let d = Tensor::new(vec![2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(contrastive_loss(&q, &d, &["a", "a"], &[0], 1.0), Err(Error::DuplicateDoc("a".into())));
}

#[test]
fn batch_pool_has_no_duplicates() {
    let ps = [pair(0, &[1, 2]), pair(1, &[0, 2]), pair(2, &[3])];
    let refs: Vec<&TrainPair> = ps.iter().collect();
    let (docs, pos) = assemble(&refs, 2);
    let ids: Vec<&str> = docs.iter().map(|d| d.0).collect();
    assert_eq!(ids, vec!["d0", "d1", "d2", "d3"]);
    assert_eq!(pos, vec![0, 1, 2]);
    check_unique(&ids).unwrap();
}

fn finetune_loss(m: &Model<f64>, proj: &Tensor<f64>, batch: &[TrainPair], normalize: bool) -> f64 {
    let refs: Vec<&TrainPair> = batch.iter().collect();
    let (docs, pos) = assemble(&refs, 1);
    let p = prompts();
    let row = |t: &[u32], k| embed_text(m, &p, t, k).unwrap().values;
    let mut q: Vec<f64> = batch.iter().flat_map(|b| row(&b.query, crate::prompt::PromptKind::NextText)).collect();
    let mut d: Vec<f64> = docs.iter().flat_map(|x| row(x.1, crate::prompt::PromptKind::SelfText)).collect();
    let qt = Tensor::new(vec![batch.len(), 8], core::mem::take(&mut q)).unwrap().matmul(proj).unwrap();
    let dt = Tensor::new(vec![docs.len(), 8], core::mem::take(&mut d)).unwrap().matmul(proj).unwrap();
    let norm = |t: Tensor<f64>| {
        if !normalize {
            return t;
        }
        let c = t.cols();
        let data = t.data().chunks(c).flat_map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(move |x| x / n)
        });
        Tensor::new(t.shape().to_vec(), data.collect()).unwrap()
    };
    let ids: Vec<&str> = docs.iter().map(|x| x.0).collect();
    contrastive_loss(&norm(qt), &norm(dt), &ids, &pos, 0.5).unwrap()
}

#[test]
fn adapter_and_projection_gradients_match_finite_differences() {
    let mut m: Model<f64> = Model::init(micro_cfg(), 11).unwrap();
    m.lora = Some(LoraSet::init(&m.config, 2, 0.5, 3).unwrap());
    // Non-zero B so gradients reach A too.
    for (i, ad) in m.lora.as_mut().unwrap().adapters.iter_mut().enumerate() {
        for (j, x) in ad.b.data_mut().iter_mut().enumerate() {
            *x = ((i * 7 + j) as f64 * 0.37).sin() * 0.2;
        }
    }
    let proj: Tensor<f64> = Tensor::new(vec![8, 5], (0..40).map(|i| ((i as f64) * 0.61).cos() * 0.5).collect()).unwrap();
    let batch: Vec<TrainPair> = pairs().into_iter().take(3).collect();
    let refs: Vec<&TrainPair> = batch.iter().collect();
    let (docs, pos) = assemble(&refs, 1);
    let p = prompts();
    let mut g = Graph::new();
    let tr = Trainable {
        base: false,
        head: false,
        lora: true,
    };
    let b = m.bind(&mut g, tr);
    let pv = g.param(&proj);
    let qs: Vec<Var> = batch.iter().map(|x| embed_graph(&m, &mut g, &b, &p, &x.query, crate::prompt::PromptKind::NextText).unwrap()).collect();
    let ds: Vec<Var> = docs.iter().map(|x| embed_graph(&m, &mut g, &b, &p, x.1, crate::prompt::PromptKind::SelfText).unwrap()).collect();
    let q = g.concat_rows(&qs).unwrap();
    let d = g.concat_rows(&ds).unwrap();
    let q = g.matmul(q, pv).unwrap();
    let d = g.matmul(d, pv).unwrap();
    let q = g.l2_normalize_rows(q).unwrap();
    let d = g.l2_normalize_rows(d).unwrap();
    let l = contrastive_loss_graph(&mut g, q, d, &pos, 0.5).unwrap();
    let grads = g.backward(l).unwrap();
    let h = 1e-5;
    let (mut diff, mut an, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    let mut acc = |a: f64, n: f64| {
        diff += (a - n).powi(2);
        an += a * a;
        nn += n * n;
    };
    for (k, &(av, bv)) in b.lora.iter().enumerate().take(4) {
        for (which, v) in [(0, av), (1, bv)] {
            let ga = grads.get(v).unwrap().to_vec();
            for j in 0..ga.len() {
                let mut mm = m.clone();
                let ad = &mut mm.lora.as_mut().unwrap().adapters[k];
                let t = if which == 0 { &mut ad.a } else { &mut ad.b };
                t.data_mut()[j] += h;
                let up = finetune_loss(&mm, &proj, &batch, true);
                let ad = &mut mm.lora.as_mut().unwrap().adapters[k];
                let t = if which == 0 { &mut ad.a } else { &mut ad.b };
                t.data_mut()[j] -= 2.0 * h;
                let down = finetune_loss(&mm, &proj, &batch, true);
                acc(ga[j], (up - down) / (2.0 * h));
            }
        }
    }
    let gp = grads.get(pv).unwrap().to_vec();
    for j in 0..gp.len() {
        let mut pp = proj.clone();
        pp.data_mut()[j] += h;
        let up = finetune_loss(&m, &pp, &batch, true);
        pp.data_mut()[j] -= 2.0 * h;
        let down = finetune_loss(&m, &pp, &batch, true);
        acc(gp[j], (up - down) / (2.0 * h));
    }
    let rel = diff.sqrt() / an.sqrt().max(nn.sqrt()).max(1e-12);
    assert!(rel < 1e-6, "relative error {rel}");
}

fn quick_cfg() -> FinetuneConfig {
    FinetuneConfig {
        steps: 40,
        batch_size: 4,
        learning_rate: 1e-2,
        temperature: 0.5,
        normalize: true,
        lora: Some(LoraConfig { rank: 2, scaling: 1.0 }),
        ..FinetuneConfig::default()
    }
}

#[test]
fn lora_training_keeps_base_weights_and_records_scheme() {
    let m: Model<f32> = Model::init(micro_cfg(), 12).unwrap();
    let out = run_finetune(m.clone(), &prompts(), &pairs(), &quick_cfg(), |_, _| {}).unwrap();
    assert_eq!(out.model.params, m.params);
    assert_eq!(out.model.scheme, Some(SchemePair::N2S));
    let l = out.model.lora.as_ref().unwrap();
    assert!(l.adapters.iter().any(|a| a.b.data().iter().any(|&x| x != 0.0)));
    let first: f64 = out.curve[..5].iter().map(|c| c.1).sum();
    let last: f64 = out.curve[35..].iter().map(|c| c.1).sum();
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn full_training_changes_base_but_not_head() {
    let m: Model<f32> = Model::init(micro_cfg(), 13).unwrap();
    let cfg = FinetuneConfig {
        lora: None,
        steps: 3,
        ..quick_cfg()
    };
    let out = run_finetune(m.clone(), &prompts(), &pairs(), &cfg, |_, _| {}).unwrap();
    let h = m.params.head().unwrap();
    assert_eq!(out.model.params.get(h), m.params.get(h));
    assert_ne!(out.model.params, m.params);
    assert!(out.model.lora.is_none());
}

#[test]
fn dimred_returns_trained_projection() {
    let m: Model<f32> = Model::init(micro_cfg(), 14).unwrap();
    let cfg = FinetuneConfig { steps: 3, ..quick_cfg() };
    let (out, desc) = train_dimred(m.clone(), &prompts(), &pairs(), 4, &cfg, |_, _| {}).unwrap();
    assert_eq!(desc.output_dim(), 4);
    assert_ne!(out.projection.unwrap(), truncated_identity::<f32>(8, 4));
    assert!(train_dimred(m, &prompts(), &pairs(), 9, &cfg, |_, _| {}).is_err());
}

#[test]
fn scheme_mismatch_is_refused() {
    let mut m: Model<f32> = Model::init(micro_cfg(), 15).unwrap();
    m.scheme = Some(SchemePair::S2S);
    assert!(matches!(
        run_finetune(m, &prompts(), &pairs(), &quick_cfg(), |_, _| {}),
        Err(Error::SchemeMismatch { .. })
    ));
}

#[test]
fn finetuning_is_deterministic() {
    let m: Model<f32> = Model::init(micro_cfg(), 16).unwrap();
    let cfg = FinetuneConfig { steps: 4, ..quick_cfg() };
    let a = run_finetune(m.clone(), &prompts(), &pairs(), &cfg, |_, _| {}).unwrap();
    let b = run_finetune(m, &prompts(), &pairs(), &cfg, |_, _| {}).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.curve, b.curve);
}

fn corpus() -> Vec<(String, Vec<u32>)> {
    (0..10).map(|j| (alloc::format!("d{j}"), vec![10 + j, 20 + j, 8])).collect()
}

#[test]
fn mined_negatives_exclude_positives_and_come_from_the_window() {
    let m: Model<f32> = Model::init(micro_cfg(), 17).unwrap();
    let p = prompts();
    let ps: Vec<TrainPair> = (0..6).map(|i| pair(i, &[])).collect();
    let cfg = MiningConfig {
        k_window: 4,
        n_negatives: 2,
        seed: 1,
    };
    let mined = mine_hard_negatives(&m, &p, SchemePair::N2S, &ps, &corpus(), &cfg).unwrap();
    assert_eq!(mined.random_filled, 0);
    let index = embed_corpus(&m, &p, &corpus(), SchemePair::N2S, None, "", 4).unwrap();
    for mp in &mined.pairs {
        assert_eq!(mp.negatives.len(), 2);
        let q = embed_text(&m, &p, &mp.query, crate::prompt::PromptKind::NextText).unwrap().values;
        let window: Vec<String> = index.search(&q, 4).unwrap().hits.into_iter().skip(1).map(|h| h.0).collect();
        for (id, _) in &mp.negatives {
            assert_ne!(id, &mp.positive_id);
            assert!(window.contains(id));
        }
    }
}

#[test]
fn short_windows_are_filled_randomly() {
    let m: Model<f32> = Model::init(micro_cfg(), 18).unwrap();
    let ps = vec![pair(0, &[])];
    let docs: Vec<(String, Vec<u32>)> = corpus().into_iter().take(2).collect();
    let cfg = MiningConfig {
        k_window: 2,
        n_negatives: 1,
        seed: 2,
    };
    let mined = mine_hard_negatives(&m, &prompts(), SchemePair::N2S, &ps, &docs, &cfg).unwrap();
    assert_eq!(mined.pairs[0].negatives[0].0, "d1".to_string());
    let cfg = MiningConfig { n_negatives: 3, ..cfg };
    let mined = mine_hard_negatives(&m, &prompts(), SchemePair::N2S, &ps, &docs, &cfg).unwrap();
    assert_eq!(mined.pairs[0].negatives.len(), 1);
}
