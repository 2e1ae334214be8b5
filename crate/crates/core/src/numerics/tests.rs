use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Central finite differences, h = 1e-5, against `backward`.
/// Returns the norm-wise relative error over all inputs.
fn grad_rel_err<Fn_>(inputs: &[Tensor<f64>], f: Fn_) -> f64
where
    Fn_: for<'g> core::ops::Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let loss = f(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t)).collect();
        let l = f(&mut g, &vars).unwrap();
        g.value(l).data()[0]
    };
    let h = 1e-5;
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(|s| s.to_vec()).unwrap_or(vec![0.0; t.len()]);
        for e in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= h;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
            diff += (num - analytic[e]).powi(2);
            na += analytic[e].powi(2);
            nn += num.powi(2);
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12)
}

#[test]
fn matmul_identity_and_hand_case() {
    let x = Tensor::<f64>::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]]).unwrap();
    assert_eq!(Tensor::identity(3).matmul(&x).unwrap(), x);
    let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let b = Tensor::<f64>::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[2, 1]);
    assert_eq!(c.data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[2, 3]);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(&a), g.constant(&b));
    assert!(matches!(g.matmul(va, vb), Err(Error::Shape { .. })));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&mut rng, &[4, 5]);
    let b = rand_tensor(&mut rng, &[5, 3]);
    let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let err = grad_rel_err(&[a, b], |g, v| {
        let c = g.matmul(v[0], v[1])?;
        g.weighted_sum(c, &w)
    });
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn cross_entropy_uniform_logits_is_ln_vocab() {
    let logits = Tensor::<f64>::zeros(&[1, 1000]);
    let mut g = Graph::new();
    let l = g.constant(&logits);
    let loss = g.softmax_cross_entropy(l, &[vec![(3, 2.0), (999, 1.0)]]).unwrap();
    assert!((g.value(loss).data()[0] - 1000f64.ln()).abs() < 1e-12);
    assert!((g.value(loss).data()[0] - 6.9078).abs() < 1e-4);
}

#[test]
fn cross_entropy_confident_target_goes_to_zero() {
    let mut prev = f64::INFINITY;
    for big in [1.0, 10.0, 30.0, 60.0] {
        let mut data = vec![0.0; 50];
        data[7] = big;
        let logits = Tensor::new(vec![1, 50], data).unwrap();
        let mut g = Graph::new();
        let l = g.constant(&logits);
        let loss = g.softmax_cross_entropy(l, &[vec![(7, 1.0)]]).unwrap();
        let v = g.value(loss).data()[0];
        assert!(v < prev);
        prev = v;
    }
    assert!(prev < 1e-20);
}

#[test]
fn cross_entropy_rejects_empty_and_oov_targets() {
    let logits = Tensor::<f64>::zeros(&[1, 10]);
    let mut g = Graph::new();
    let l = g.constant(&logits);
    assert_eq!(g.softmax_cross_entropy(l, &[vec![]]), Err(Error::EmptyTargets));
    assert!(matches!(
        g.softmax_cross_entropy(l, &[vec![(10, 1.0)]]),
        Err(Error::TokenOutOfVocab { id: 10, vocab: 10 })
    ));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = rand_tensor(&mut rng, &[2, 17]);
        let targets = vec![vec![(3usize, 2.0), (5, 1.0)], vec![(16, 1.0)]];
        let err = grad_rel_err(&[logits], |g, v| g.softmax_cross_entropy(v[0], &targets));
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

fn attention_out(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, mask: &AttentionMask, heads: usize) -> Tensor<f64> {
    let rows = Rc::new(mask.visible_rows().unwrap());
    let mut g = Graph::new();
    let (vq, vk, vv) = (g.constant(q), g.constant(k), g.constant(v));
    let o = g.masked_attention(vq, vk, vv, &rows, heads).unwrap();
    g.value(o).clone()
}

#[test]
fn causal_attention_first_row_copies_first_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (q, k, v) = (rand_tensor(&mut rng, &[4, 6]), rand_tensor(&mut rng, &[4, 6]), rand_tensor(&mut rng, &[4, 6]));
    let o = attention_out(&q, &k, &v, &AttentionMask::causal(4), 2);
    assert_eq!(o.row(0), v.row(0));
}

#[test]
fn single_support_row_equals_that_value_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (q, k, v) = (rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4]));
    let mut m = AttentionMask::causal(3);
    m.set(2, 0, false);
    m.set(2, 2, false);
    let o = attention_out(&q, &k, &v, &m, 1);
    assert_eq!(o.row(2), v.row(1));
}

#[test]
fn all_false_row_is_degenerate() {
    let mut m = AttentionMask::causal(3);
    m.set(1, 0, false);
    m.set(1, 1, false);
    assert_eq!(m.visible_rows().unwrap_err(), Error::DegenerateMask { row: 1 });
}

#[test]
fn attention_weights_sum_to_one_and_vanish_when_masked() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let l = 6;
    let (q, k, v) = (rand_tensor(&mut rng, &[l, 8]), rand_tensor(&mut rng, &[l, 8]), rand_tensor(&mut rng, &[l, 8]));
    let mut m = AttentionMask::causal(l);
    m.set(5, 2, false);
    m.set(4, 0, false);
    let rows = Rc::new(m.visible_rows().unwrap());
    let mut g = Graph::new();
    let (vq, vk, vv) = (g.constant(&q), g.constant(&k), g.constant(&v));
    let o = g.masked_attention(vq, vk, vv, &rows, 2).unwrap();
    let w = g.attention_weights(o).unwrap();
    for h in 0..2 {
        for i in 0..l {
            let row = &w[h * l * l + i * l..h * l * l + (i + 1) * l];
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            for j in 0..l {
                if !m.allows(i, j) {
                    assert_eq!(row[j], 0.0);
                }
            }
        }
    }
}

#[test]
fn perturbing_invisible_values_leaves_row_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let l = 5;
    let (q, k, v) = (rand_tensor(&mut rng, &[l, 4]), rand_tensor(&mut rng, &[l, 4]), rand_tensor(&mut rng, &[l, 4]));
    let mut m = AttentionMask::causal(l);
    m.set(4, 1, false);
    let base = attention_out(&q, &k, &v, &m, 1);
    let mut v2 = v.clone();
    for x in v2.row_mut(1) {
        *x += 3.0;
    }
    let mut k2 = k.clone();
    for x in k2.row_mut(1) {
        *x -= 2.0;
    }
    let pert = attention_out(&q, &k2, &v2, &m, 1);
    assert_eq!(base.row(4), pert.row(4));
    assert_ne!(base.row(2), pert.row(2));
}

#[test]
fn every_differentiable_op_passes_gradcheck() {
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = rand_tensor(&mut rng, &[3, 8]);
        let y = rand_tensor(&mut rng, &[3, 8]);
        let w8 = rand_tensor(&mut rng, &[8]);
        let r: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let check = |name: &str, err: f64| assert!(err < 1e-4, "{name} seed {seed}: {err}");

        check("add", grad_rel_err(&[x.clone(), y.clone()], |g, v| {
            let o = g.add(v[0], v[1])?;
            g.weighted_sum(o, &r)
        }));
        check("mul", grad_rel_err(&[x.clone(), y.clone()], |g, v| {
            let o = g.mul(v[0], v[1])?;
            g.weighted_sum(o, &r)
        }));
        check("silu", grad_rel_err(std::slice::from_ref(&x), |g, v| {
            let o = g.silu(v[0])?;
            g.weighted_sum(o, &r)
        }));
        check("gelu", grad_rel_err(std::slice::from_ref(&x), |g, v| {
            let o = g.gelu(v[0])?;
            g.weighted_sum(o, &r)
        }));
        check("rms_norm", grad_rel_err(&[x.clone(), w8.clone()], |g, v| {
            let o = g.rms_norm(v[0], v[1], 1e-6)?;
            g.weighted_sum(o, &r)
        }));
        check("rope", grad_rel_err(std::slice::from_ref(&x), |g, v| {
            let o = g.rope(v[0], &[0, 5, 2], 4, 10000.0)?;
            g.weighted_sum(o, &r)
        }));
        check("l2_normalize", grad_rel_err(std::slice::from_ref(&x), |g, v| {
            let o = g.l2_normalize_rows(v[0])?;
            g.weighted_sum(o, &r)
        }));
        check("transpose+select+concat", grad_rel_err(&[x.clone(), y.clone()], |g, v| {
            let t = g.transpose(v[0])?;
            let t = g.transpose(t)?;
            let s = g.select_rows(t, &[2, 0])?;
            let c = g.concat_rows(&[s, v[1]])?;
            g.weighted_sum(c, &[r.clone(), r[..16].to_vec()].concat())
        }));
        let target: Vec<f64> = r.iter().map(|x| x * 0.5).collect();
        check("mse+scale", grad_rel_err(std::slice::from_ref(&x), |g, v| {
            let s = g.scale(v[0], 1.7)?;
            g.mse(s, &target)
        }));
        let table = rand_tensor(&mut rng, &[5, 8]);
        check("embedding", grad_rel_err(&[table], |g, v| {
            let e = g.embedding(v[0], &[4, 1, 4])?;
            g.weighted_sum(e, &r)
        }));
        let mut mask = AttentionMask::causal(3);
        mask.set(2, 1, false);
        let rows = Rc::new(mask.visible_rows().unwrap());
        let z = rand_tensor(&mut rng, &[3, 8]);
        check("masked_attention", grad_rel_err(&[x.clone(), y.clone(), z], |g, v| {
            let o = g.masked_attention(v[0], v[1], v[2], &rows, 2)?;
            g.weighted_sum(o, &r)
        }));
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = rand_tensor(&mut rng, &[6, 7]);
    let b = rand_tensor(&mut rng, &[7, 5]);
    let run = || {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(&a), g.constant(&b));
        let c = g.matmul(va, vb).unwrap();
        let s = g.silu(c).unwrap();
        g.value(s).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_output_is_an_error() {
    let a = Tensor::<f64>::new(vec![1, 2], vec![f64::MAX, f64::MAX]).unwrap();
    let mut g = Graph::new();
    let va = g.constant(&a);
    assert_eq!(g.add(va, va), Err(Error::NonFinite { op: "add" }));
}
