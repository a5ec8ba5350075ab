use sws_nnkit::checkpoint::{decode_checkpoint, encode_checkpoint, CheckpointHeader};
use sws_nnkit::{adam_step, AdamState, NnError, ParamStore, Tensor};

/// Independent scalar Adam used as the reference trajectory.
fn reference_adam(lr: f64, steps: usize) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut w, mut m, mut v) = (0.0f64, 0.0, 0.0);
    let mut traj = Vec::with_capacity(steps);
    for t in 1..=steps {
        let g = 2.0 * (w - 3.0);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        w -= lr * mh / (vh.sqrt() + eps);
        traj.push(w);
    }
    traj
}

fn run_adam(steps: usize) -> Vec<f64> {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::zeros(&[1])).unwrap();
    let mut state = AdamState::new(&store, 0.01);
    let mut traj = Vec::new();
    for _ in 0..steps {
        let w = store.get(id).data()[0];
        adam_step(&mut store, &[vec![2.0 * (w - 3.0)]], &mut state).unwrap();
        traj.push(store.get(id).data()[0]);
    }
    traj
}

#[test]
fn adam_minimizes_quadratic_like_reference() {
    let reference = reference_adam(0.01, 5000);
    let traj = run_adam(5000);
    let reached = reference.iter().position(|w| (w - 3.0).abs() < 0.01);
    assert!(reached.is_some_and(|s| s < 5000));
    for (a, b) in traj.iter().zip(&reference) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((traj[4999] - 3.0).abs() < 0.01, "final w = {}", traj[4999]);
}

#[test]
fn adam_is_deterministic() {
    assert_eq!(run_adam(200), run_adam(200));
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut store = ParamStore::<f32>::new();
    store.add("w", Tensor::full(&[3], 1.5)).unwrap();
    let mut state = AdamState::new(&store, 0.1);
    adam_step(&mut store, &[vec![0.0; 3]], &mut state).unwrap();
    assert_eq!(store.tensors()[0].data(), &[1.5, 1.5, 1.5]);
    assert_eq!(state.step, 1);
}

#[test]
fn nan_gradient_is_a_numerical_error_and_nothing_moves() {
    let mut store = ParamStore::<f32>::new();
    store.add("w", Tensor::full(&[2], 1.0)).unwrap();
    let mut state = AdamState::new(&store, 0.1);
    let err = adam_step(&mut store, &[vec![0.5, f32::NAN]], &mut state).unwrap_err();
    assert!(matches!(err, NnError::Numerical(ref m) if m.contains("w[1]")));
    assert_eq!(store.tensors()[0].data(), &[1.0, 1.0]);
    assert_eq!(state.step, 0);
}

#[test]
fn checkpoint_roundtrip_and_corruption() {
    let mut store = ParamStore::<f32>::new();
    store
        .add("a.w", Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap())
        .unwrap();
    store
        .add("a.b", Tensor::from_vec(&[2], vec![0.1, 0.2]).unwrap())
        .unwrap();
    let header = CheckpointHeader {
        config_hash: "abc".into(),
        seeds: vec![7],
        step: 42,
        dtype: String::new(),
        params: vec![],
        extra: serde_json::json!({"epoch": 3}),
    };
    let bytes = encode_checkpoint(&header, &store).unwrap();
    assert_eq!(&bytes[..4], b"CKPT");
    let (h, s) = decode_checkpoint::<f32>(&bytes).unwrap();
    assert_eq!(h.step, 42);
    assert_eq!(h.params.len(), 2);
    assert_eq!(s.tensors(), store.tensors());
    assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]).is_err());
    assert!(decode_checkpoint::<f64>(&bytes).is_err());
}
