//! Finite-difference verification of every differentiable op and layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sws_nnkit::layers::{EncoderLayer, FeedForward, Linear};
use sws_nnkit::{grad_check, Bound, GradCheckOptions, Graph, NnError, ParamStore, Tensor, Var};

const TOL: f64 = 1e-4;

fn t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        fraction: 1.0,
        seed,
        ..Default::default()
    }
}

/// Reduces any tensor to a scalar through a fixed random projection so every
/// output coordinate carries a distinct weight.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let w = t(g.shape(y), seed + 1000);
    let w = g.input(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

fn check(params: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> sws_nnkit::Result<Var>) {
    for seed in 0..3 {
        let err = grad_check(params, &f, opts(seed)).unwrap();
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}

#[test]
fn sum_of_squares_is_exact() {
    let w = t(&[40], 1);
    let err = grad_check(
        &[w],
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn detached_operand_is_flagged() {
    // v * stop_grad(v): the tape sees half of the true derivative.
    let err = grad_check(
        &[t(&[10], 2)],
        |g, v| {
            let c = g.input(g.value(v[0]).clone());
            let sq = g.mul(v[0], c)?;
            Ok(g.sum(sq))
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!((err - 0.5).abs() < 1e-6, "{err}");
}

#[test]
fn matmul_add_row_sub_scale() {
    check(&[t(&[3, 4], 1), t(&[4, 5], 2), t(&[5], 3), t(&[3, 5], 4)], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        let y = g.add_row(y, v[2])?;
        let y = g.sub(y, v[3])?;
        let y = g.scale(y, 0.7);
        Ok(project(g, y, 1))
    });
}

#[test]
fn relu_sigmoid_softmax() {
    check(&[t(&[4, 6], 5)], |g, v| {
        let a = g.relu(v[0]);
        let b = g.sigmoid(v[0]);
        let c = g.softmax(v[0]);
        let s = g.add(a, b)?;
        let s = g.add(s, c)?;
        Ok(project(g, s, 2))
    });
}

#[test]
fn layer_norm_all_inputs() {
    check(&[t(&[5, 8], 6), t(&[8], 7), t(&[8], 8)], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
        Ok(project(g, y, 3))
    });
}

#[test]
fn concat_slice_split_reshape_gather() {
    check(&[t(&[3, 4], 9), t(&[3, 2], 10), t(&[2, 4], 11)], |g, v| {
        let c1 = g.concat(&[v[0], v[1]], 1)?;
        let c0 = g.concat(&[v[0], v[2]], 0)?;
        let parts = g.split(c1, 1, &[1, 5])?;
        let s = g.slice(c0, 0, 1, 3)?;
        let r = g.reshape(s, &[4, 3])?;
        let gat = g.gather_rows(r, &[3, 0, 0, 2])?;
        let a = project(g, parts[1], 4);
        let b = project(g, gat, 5);
        let m = g.mean(c0);
        let ab = g.add(a, b)?;
        g.add(ab, m)
    });
}

#[test]
fn attention_with_mask() {
    let mask = [true, false, true, true, true, true, true, false];
    check(&[t(&[8, 12], 12)], |g, v| {
        let y = g.attention(v[0], 2, 2, 4, Some(&mask))?;
        Ok(project(g, y, 6))
    });
}

#[test]
fn pair_ops() {
    check(&[t(&[6, 3], 13)], |g, v| {
        let f = g.pair_features(v[0], 3)?;
        let d = g.pair_diff(v[0], 3)?;
        let a = project(g, f, 7);
        let b = project(g, d, 8);
        g.add(a, b)
    });
}

#[test]
fn losses() {
    let target = t(&[4, 3], 14);
    check(&[t(&[4, 3], 15)], |g, v| {
        let ce = g.cross_entropy(v[0], &[Some(2), None, Some(0), Some(1)])?;
        let mse = g.mse(
            v[0],
            &target,
            Some(&[true, false, true, true, true, true, false, true, true, true, true, true]),
        )?;
        g.add(ce, mse)
    });
}

#[test]
fn seeded_dropout_is_checkable_and_unseeded_is_rejected() {
    check(&[t(&[4, 5], 16)], |g, v| {
        let y = g.dropout(v[0], 0.3, Some(9))?;
        Ok(project(g, y, 9))
    });
    let err = grad_check(
        &[t(&[4, 5], 16)],
        |g, v| {
            let y = g.dropout(v[0], 0.3, None)?;
            Ok(g.sum(y))
        },
        GradCheckOptions::default(),
    );
    assert!(matches!(err, Err(NnError::Contract(_))));
}

#[test]
fn non_scalar_output_is_a_contract_error() {
    let err = grad_check(&[t(&[2, 2], 1)], |g, v| g.add(v[0], v[0]), GradCheckOptions::default());
    assert!(matches!(err, Err(NnError::Contract(_))));
}

/// Checks a layer stack with every store parameter as a grad_check leaf.
fn layer_check(store: &ParamStore<f64>, f: impl Fn(&mut Graph<f64>, &Bound) -> sws_nnkit::Result<Var>) {
    for seed in 0..3 {
        let err = grad_check(
            store.tensors(),
            |g, vars| f(g, &Bound::from(vars.to_vec())),
            GradCheckOptions {
                fraction: 0.3,
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn linear_feedforward_and_encoder_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, "lin", 8, 8, &mut rng).unwrap();
    let ffn = FeedForward::new(&mut store, "ffn", 8, 16, 8, &mut rng).unwrap();
    let enc = EncoderLayer::new(&mut store, "enc", 8, 2, 16, &mut rng).unwrap();
    let x = t(&[6, 8], 21);
    let mask = [true, true, true, false, true, true];
    layer_check(&store, |g, p| {
        let xi = g.input(x.clone());
        let h = lin.forward(g, p, xi)?;
        let h = ffn.forward(g, p, h)?;
        let h = enc.forward(g, p, h, 2, 3, Some(&mask), None)?;
        Ok(project(g, h, 10))
    });
}
