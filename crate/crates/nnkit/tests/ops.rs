use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sws_nnkit::layers::{multi_head_self_attention, SelfAttention};
use sws_nnkit::{Graph, NnError, ParamStore, Tensor};

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut g = Graph::<f32>::new();
    let x = g.input(rand_tensor(&[5, 7], 1).cast());
    let y = g.softmax(x);
    for r in 0..5 {
        let s: f32 = g.value(y).row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-6, "row {r} sums to {s}");
    }
}

#[test]
fn mse_of_identical_tensors_is_zero_with_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let t = rand_tensor(&[3, 4], 2);
    let x = g.leaf(t.clone());
    let l = g.mse(x, &t, None).unwrap();
    assert_eq!(g.item(l), 0.0);
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln_c() {
    for c in [3usize, 7, 15, 30] {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[4, c]));
        let l = g.cross_entropy(x, &[Some(0), Some(c - 1), None, Some(1)]).unwrap();
        assert!((g.item(l) - (c as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_with_everything_masked_is_empty() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.cross_entropy(x, &[None, None]), Err(NnError::EmptyLoss)));
}

#[test]
fn layer_norm_rows_have_zero_mean_unit_variance() {
    let mut g = Graph::<f64>::new();
    let x = g.input(rand_tensor(&[6, 32], 3));
    let x = g.scale(x, 3.0);
    let gamma = g.input(Tensor::full(&[32], 1.0));
    let beta = g.input(Tensor::zeros(&[32]));
    let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
    for r in 0..6 {
        let row = g.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 32.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5, "mean {mean} var {var}");
    }
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[4, 5]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    assert!(g.add(a, b).is_err());
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        SelfAttention::new(&mut store, "a", 10, 3, &mut rng),
        Err(NnError::Config(_))
    ));
}

fn attention_fixture(seed: u64) -> (ParamStore<f64>, SelfAttention) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attn = SelfAttention::new(&mut store, "attn", 8, 2, &mut rng).unwrap();
    (store, attn)
}

#[test]
fn single_token_attention_is_an_affine_map_of_that_token() {
    let (store, attn) = attention_fixture(4);
    let x = rand_tensor(&[1, 8], 5);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.input(x.clone());
    let y = multi_head_self_attention(&mut g, &p, &attn, xv).unwrap();
    // With a single key the attention weight is 1, so the output is
    // out(v(x)) where v is the value slice of the qkv projection.
    let w = store.get(attn.qkv.w);
    let b = store.get(attn.qkv.b);
    let mut v = vec![0.0; 8];
    for c in 0..8 {
        v[c] = b.data()[16 + c] + (0..8).map(|k| x.data()[k] * w.data()[k * 24 + 16 + c]).sum::<f64>();
    }
    let wo = store.get(attn.out.w);
    let bo = store.get(attn.out.b);
    for c in 0..8 {
        let expect = bo.data()[c] + (0..8).map(|k| v[k] * wo.data()[k * 8 + c]).sum::<f64>();
        assert!((g.value(y).data()[c] - expect).abs() < 1e-12);
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let (store, attn) = attention_fixture(6);
    let x = rand_tensor(&[5, 8], 7);
    let perm = [3usize, 0, 4, 1, 2];
    let run = |input: Tensor<f64>| {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.input(input);
        let y = multi_head_self_attention(&mut g, &p, &attn, xv).unwrap();
        g.value(y).clone()
    };
    let y = run(x.clone());
    let mut xp = Vec::new();
    for &i in &perm {
        xp.extend_from_slice(x.row(i));
    }
    let yp = run(Tensor::from_vec(&[5, 8], xp).unwrap());
    for (r, &i) in perm.iter().enumerate() {
        for c in 0..8 {
            assert!((yp.row(r)[c] - y.row(i)[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn masked_keys_do_not_influence_valid_rows() {
    let (store, attn) = attention_fixture(8);
    let x = rand_tensor(&[4, 8], 9);
    let mask = [true, true, false, true];
    let run = |input: Tensor<f64>| {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.input(input);
        let y = attn.forward(&mut g, &p, xv, 1, 4, Some(&mask)).unwrap();
        g.value(y).clone()
    };
    let a = run(x.clone());
    let mut x2 = x.clone();
    for c in 0..8 {
        x2.data_mut()[2 * 8 + c] += 10.0;
    }
    let b = run(x2);
    for r in [0usize, 1, 3] {
        for c in 0..8 {
            assert!((a.row(r)[c] - b.row(r)[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn pair_features_swap_negates_difference_block() {
    let mut g = Graph::<f64>::new();
    let x = g.input(rand_tensor(&[3, 4], 10));
    let p = g.pair_features(x, 3).unwrap();
    let v = g.value(p);
    let (i, j) = (0usize, 2usize);
    let rij = v.row(i * 3 + j);
    let rji = v.row(j * 3 + i);
    for c in 0..4 {
        assert_eq!(rij[c], rji[4 + c]);
        assert_eq!(rij[8 + c], -rji[8 + c]);
    }
}

#[test]
fn forward_is_deterministic() {
    let (store, attn) = attention_fixture(11);
    let x = rand_tensor(&[6, 8], 12);
    let run = || {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.input(x.clone());
        let y = multi_head_self_attention(&mut g, &p, &attn, xv).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn dropout_with_seed_is_reproducible_and_scaled() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::full(&[1, 1000], 1.0));
    let a = g.dropout(x, 0.25, Some(3)).unwrap();
    let b = g.dropout(x, 0.25, Some(3)).unwrap();
    assert_eq!(g.value(a), g.value(b));
    assert!(g
        .value(a)
        .data()
        .iter()
        .all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12));
    assert!(!g.has_unseeded_dropout());
    let _ = g.dropout(x, 0.25, None).unwrap();
    assert!(g.has_unseeded_dropout());
}
