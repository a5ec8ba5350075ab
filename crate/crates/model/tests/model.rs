use std::collections::{BTreeMap, HashMap};

use sws_core::io::{generate_dataset, Dataset, DatasetConfig};
use sws_core::labels::{dataset_labels, SRLabels};
use sws_core::patches::PyramidConfig;
use sws_core::scenegen::answer_vocabulary;
use sws_model::config::{ModelConfig, RelposInput, SrMode, SrTask, TrainConfig};
use sws_model::data::{make_batch, prepare, question_vocabulary, Batch, PreparedData};
use sws_model::model::Model;
use sws_model::train::{few_shot_subsample, metrics_csv, total_loss, train};
use sws_model::ModelError;
use sws_nnkit::{grad_check, Bound, GradCheckOptions, Graph, ParamStore, Tensor};

fn fixture(n_scenes: usize) -> (Dataset, HashMap<String, SRLabels>) {
    let ds = generate_dataset(&DatasetConfig {
        n_scenes,
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    let labels = dataset_labels(&ds, 3, &[3, 7, 15, 30], 1.5)
        .unwrap()
        .into_iter()
        .map(|l| (l.scene_id.clone(), l))
        .collect();
    (ds, labels)
}

fn small_cfg(ds: &Dataset) -> ModelConfig {
    ModelConfig {
        hidden: 16,
        heads: 2,
        ffn_mult: 2,
        lang_layers: 1,
        visual_layers: 1,
        cross_layers: 1,
        fusion_layers: 1,
        question_vocab: question_vocabulary(&ds.qa),
        answer_vocab: answer_vocabulary(),
        pyramid: PyramidConfig {
            scales: vec![2, 3],
            patch_side: 4,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn full(mut cfg: ModelConfig) -> ModelConfig {
    cfg.sr_task = SrTask::Rpe;
    cfg.sr_mode = SrMode::Bins(15);
    cfg.relpos_input = RelposInput::Early;
    cfg.use_patches = true;
    cfg.alpha = 0.7;
    cfg.beta = 0.3;
    cfg
}

fn batch_of<T: sws_nnkit::Scalar>(data: &PreparedData, cfg: &ModelConfig, ids: &[usize]) -> Batch<T> {
    make_batch(data, ids, cfg).unwrap()
}

#[test]
fn encoder_stream_shapes() {
    let (ds, labels) = fixture(6);
    let mut cfg = small_cfg(&ds);
    cfg.max_question_len = 12;
    cfg.hidden = 64;
    cfg.heads = 4;
    let data = prepare(&ds, &labels, &cfg).unwrap();
    let (model, params) = Model::new::<f32>(&cfg, 0).unwrap();
    let batch = batch_of::<f32>(&data, &cfg, &[0]);
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let enc = model.encode(&mut g, &p, &batch, None).unwrap();
    assert_eq!(g.shape(enc.x), &[1, 64]);
    assert_eq!(g.shape(enc.v), &[6, 64]);
    assert_eq!(g.shape(enc.t), &[12, 64]);
}

#[test]
fn fusion_length_with_default_pyramid() {
    let (ds, _) = fixture(2);
    let mut cfg = small_cfg(&ds);
    cfg.max_question_len = 12;
    cfg.pyramid = PyramidConfig::default();
    cfg.use_patches = true;
    assert_eq!(cfg.num_patches(), 84);
    assert_eq!(cfg.fusion_len(), 103);
}

#[test]
fn full_config_head_shapes() {
    let (ds, labels) = fixture(6);
    let base = small_cfg(&ds);
    let n = base.max_objects;
    for (task, mode) in [
        (SrTask::Rpe, SrMode::Bins(15)),
        (SrTask::Oce, SrMode::Bins(7)),
        (SrTask::OceRpe, SrMode::Bins(3)),
        (SrTask::Rpe, SrMode::Regression),
    ] {
        let mut cfg = full(base.clone());
        cfg.sr_task = task;
        cfg.sr_mode = mode;
        let data = prepare(&ds, &labels, &cfg).unwrap();
        let (model, params) = Model::new::<f32>(&cfg, 1).unwrap();
        let batch = batch_of::<f32>(&data, &cfg, &[0, 1, 2]);
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let out = model.forward(&mut g, &p, &batch, None).unwrap();
        assert_eq!(g.shape(out.vqa_logits), &[3, cfg.answer_vocab.len()]);
        assert_eq!(g.shape(out.fused.3.unwrap()), &[3 * cfg.num_patches(), 16]);
        match mode {
            SrMode::Regression => {
                assert_eq!(g.shape(out.sr_reg.unwrap()), &[3 * n, 3]);
                assert_eq!(g.shape(out.rpe_reg.unwrap()), &[3 * n * n, 3]);
                assert!(g
                    .value(out.sr_reg.unwrap())
                    .data()
                    .iter()
                    .all(|v| (0.0..=1.0).contains(v)));
            }
            SrMode::Bins(c) => {
                if task.uses_oce() {
                    assert_eq!(g.shape(out.bin_object.unwrap()), &[3 * n * 3, c]);
                }
                if task.uses_rpe() {
                    assert_eq!(g.shape(out.bin_pair.unwrap()), &[3 * n * n * 3, c]);
                }
            }
        }
        let (_, sr, _) = model.loss(&mut g, &out, &batch).unwrap();
        assert!(sr.is_some());
    }
}

#[test]
fn regression_rpe_is_antisymmetric() {
    let (ds, labels) = fixture(4);
    let mut cfg = full(small_cfg(&ds));
    cfg.sr_mode = SrMode::Regression;
    let data = prepare(&ds, &labels, &cfg).unwrap();
    let (model, params) = Model::new::<f64>(&cfg, 2).unwrap();
    let batch = batch_of::<f64>(&data, &cfg, &[0]);
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let out = model.forward(&mut g, &p, &batch, None).unwrap();
    let r = g.value(out.rpe_reg.unwrap());
    let n = cfg.max_objects;
    for i in 0..n {
        for j in 0..n {
            for d in 0..3 {
                assert_eq!(r.row(i * n + j)[d], -r.row(j * n + i)[d]);
            }
        }
    }
}

#[test]
fn padded_objects_do_not_affect_outputs_or_loss() {
    let (ds, labels) = fixture(8);
    let mut cfg = full(small_cfg(&ds));
    cfg.max_objects = 8;
    let data = prepare(&ds, &labels, &cfg).unwrap();
    let (model, params) = Model::new::<f64>(&cfg, 3).unwrap();
    let ids = [0, 5];
    let clean = batch_of::<f64>(&data, &cfg, &ids);
    let mut dirty = clean.clone();
    let f = dirty.objects.shape()[1];
    for (row, &m) in clean.object_mask.iter().enumerate() {
        if !m {
            for v in &mut dirty.objects.data_mut()[row * f..(row + 1) * f] {
                *v = 37.5;
            }
        }
    }
    assert_ne!(clean.objects, dirty.objects, "fixture must contain padding");
    let run = |b: &Batch<f64>| {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let out = model.forward(&mut g, &p, b, None).unwrap();
        let (_, _, total) = model.loss(&mut g, &out, b).unwrap();
        g.backward(total).unwrap();
        let grads = p.grads(&g);
        (
            g.value(out.encoder.x).clone(),
            g.value(out.vqa_logits).clone(),
            g.item(total),
            grads,
        )
    };
    let (x0, l0, t0, g0) = run(&clean);
    let (x1, l1, t1, g1) = run(&dirty);
    assert!(x0.max_abs_diff(&x1) < 1e-12);
    assert!(l0.max_abs_diff(&l1) < 1e-12);
    assert!((t0 - t1).abs() < 1e-12);
    // The object input projection sees padded rows only through masked keys.
    let w = params.id("object_box.w").unwrap().0;
    assert!(g0[w].iter().zip(&g1[w]).all(|(a, b)| (a - b).abs() < 1e-10));
}

#[test]
fn identical_inputs_identical_outputs() {
    let (ds, labels) = fixture(4);
    let cfg = full(small_cfg(&ds));
    let data = prepare(&ds, &labels, &cfg).unwrap();
    let (model, params) = Model::new::<f32>(&cfg, 4).unwrap();
    let (_, params2) = Model::new::<f32>(&cfg, 4).unwrap();
    assert_eq!(params.tensors(), params2.tensors());
    let batch = batch_of::<f32>(&data, &cfg, &[0, 1]);
    let logits = |ps: &ParamStore<f32>| {
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let out = model.forward(&mut g, &p, &batch, None).unwrap();
        g.value(out.vqa_logits).clone()
    };
    assert_eq!(logits(&params), logits(&params2));
}

#[test]
fn relpos_projection_is_affine() {
    let (ds, _) = fixture(2);
    let mut cfg = small_cfg(&ds);
    cfg.relpos_input = RelposInput::Early;
    let (model, params) = Model::new::<f64>(&cfg, 5).unwrap();
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let zero = g.input(Tensor::zeros(&[6, 3]));
    let r0 = model.project_relpos(&mut g, &p, zero).unwrap().unwrap();
    assert_eq!(g.shape(r0), &[6, 16]);
    let bias = params.get(params.id("relpos_proj.b").unwrap()).data().to_vec();
    for row in 0..6 {
        assert_eq!(g.value(r0).row(row), &bias[..]);
    }
    let x: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin()).collect();
    let x1 = g.input(Tensor::from_vec(&[6, 3], x.clone()).unwrap());
    let x2 = g.input(Tensor::from_vec(&[6, 3], x.iter().map(|v| 2.0 * v).collect()).unwrap());
    let r1 = model.project_relpos(&mut g, &p, x1).unwrap().unwrap();
    let r2 = model.project_relpos(&mut g, &p, x2).unwrap().unwrap();
    for (i, (a, b)) in g.value(r1).data().iter().zip(g.value(r2).data()).enumerate() {
        let bi = bias[i % 16];
        assert!(((b - bi) - 2.0 * (a - bi)).abs() < 1e-12);
    }
}

#[test]
fn early_and_late_agree_on_zero_offsets() {
    let (ds, labels) = fixture(4);
    let mut early = full(small_cfg(&ds));
    early.use_patches = false;
    let mut late = early.clone();
    late.relpos_input = RelposInput::Late;
    let data = prepare(&ds, &labels, &early).unwrap();
    let (m_early, params) = Model::new::<f64>(&early, 6).unwrap();
    let (m_late, params_late) = Model::new::<f64>(&late, 6).unwrap();
    assert_eq!(params.tensors(), params_late.tensors());
    let batch = batch_of::<f64>(&data, &early, &[0, 1]);
    let fused = |m: &Model| {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let enc = m.encode(&mut g, &p, &batch, None).unwrap();
        let r = g.input(Tensor::zeros(&[2 * early.max_objects, early.hidden]));
        let (x, v, t, _) = m.fuse(&mut g, &p, enc, None, Some(r), &batch, None).unwrap();
        (g.value(x).clone(), g.value(v).clone(), g.value(t).clone())
    };
    assert_eq!(fused(&m_early), fused(&m_late));
}

#[test]
fn relpos_none_ignores_offsets() {
    let (ds, labels) = fixture(4);
    let cfg = small_cfg(&ds);
    let data = prepare(&ds, &labels, &cfg).unwrap();
    let (model, params) = Model::new::<f64>(&cfg, 7).unwrap();
    assert!(params.id("relpos_proj.w").is_none());
    let batch = batch_of::<f64>(&data, &cfg, &[0]);
    assert!(batch.relpos.is_none());
    let fused = |r: f64| {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let enc = model.encode(&mut g, &p, &batch, None).unwrap();
        let r = g.input(Tensor::full(&[cfg.max_objects, cfg.hidden], r));
        let (x, ..) = model.fuse(&mut g, &p, enc, None, Some(r), &batch, None).unwrap();
        g.value(x).clone()
    };
    assert_eq!(fused(0.0), fused(5.0));
}

#[test]
fn pairwise_input_difference_negates_under_swap() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_vec(&[3, 2], vec![0.1, 0.2, -0.4, 0.9, 0.5, -0.3]).unwrap());
    let pf = g.pair_features(x, 3).unwrap();
    let v = g.value(pf);
    for i in 0..3 {
        for j in 0..3 {
            let a = v.row(i * 3 + j);
            let b = v.row(j * 3 + i);
            for k in 0..2 {
                assert_eq!(a[4 + k], -b[4 + k]);
            }
        }
    }
}

#[test]
fn ablation_lattice_configs_validate() {
    let (ds, labels) = fixture(3);
    let base = small_cfg(&ds);
    let tasks = [SrTask::None, SrTask::Oce, SrTask::Rpe, SrTask::OceRpe];
    let modes = [
        SrMode::Regression,
        SrMode::Bins(3),
        SrMode::Bins(7),
        SrMode::Bins(15),
        SrMode::Bins(30),
    ];
    let inputs = [RelposInput::None, RelposInput::Early, RelposInput::Late];
    let mut count = 0;
    for task in tasks {
        for mode in modes {
            for input in inputs {
                for patches in [false, true] {
                    let mut cfg = base.clone();
                    cfg.sr_task = task;
                    cfg.sr_mode = mode;
                    cfg.relpos_input = input;
                    cfg.use_patches = patches;
                    cfg.validate().unwrap();
                    let data = prepare(&ds, &labels, &cfg).unwrap();
                    let (model, params) = Model::new::<f32>(&cfg, 0).unwrap();
                    let batch = batch_of::<f32>(&data, &cfg, &[0]);
                    let mut g = Graph::new();
                    let p = params.bind(&mut g);
                    let out = model.forward(&mut g, &p, &batch, None).unwrap();
                    let (_, sr, total) = model.loss(&mut g, &out, &batch).unwrap();
                    assert_eq!(sr.is_some(), task != SrTask::None);
                    assert!(g.item(total).is_finite());
                    count += 1;
                }
            }
        }
    }
    assert_eq!(count, 120);
    let mut bad = base.clone();
    bad.sr_mode = SrMode::Bins(10);
    assert!(matches!(bad.validate(), Err(ModelError::Config(_))));
    bad = base;
    bad.alpha = 0.0;
    assert!(bad.validate().is_err());
}

#[test]
fn full_model_gradient_check() {
    let (ds, labels) = fixture(4);
    let mut cfg = full(small_cfg(&ds));
    cfg.hidden = 8;
    cfg.pyramid.scales = vec![2];
    cfg.pyramid.patch_side = 2;
    let data = prepare(&ds, &labels, &cfg).unwrap();
    let batch = batch_of::<f64>(&data, &cfg, &[0, 3]);
    for seed in 0..3 {
        let (model, params) = Model::new::<f64>(&cfg, seed).unwrap();
        let err = grad_check(
            params.tensors(),
            |g, vars| {
                let p = Bound::from(vars.to_vec());
                let out = model.forward(g, &p, &batch, None).map_err(nn)?;
                let (_, _, total) = model.loss(g, &out, &batch).map_err(nn)?;
                Ok(total)
            },
            GradCheckOptions {
                seed,
                fraction: 0.1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: max relative error {err}");
    }
}

fn nn(e: ModelError) -> sws_nnkit::NnError {
    match e {
        ModelError::Nn(e) => e,
        other => sws_nnkit::NnError::Contract(other.to_string()),
    }
}

#[test]
fn sr_loss_cases() {
    let (ds, labels) = fixture(4);
    let mut cfg = full(small_cfg(&ds));
    cfg.use_patches = false;
    let data = prepare(&ds, &labels, &cfg).unwrap();
    let (model, params) = Model::new::<f64>(&cfg, 8).unwrap();
    let batch = batch_of::<f64>(&data, &cfg, &[0, 1]);

    // Uniform logits: zero the last layer of the pairwise head.
    let mut flat = params.clone();
    for name in ["bin_pair.l2.w", "bin_pair.l2.b"] {
        let id = flat.id(name).unwrap_or_else(|| panic!("missing {name}"));
        flat.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut g = Graph::new();
    let p = flat.bind(&mut g);
    let out = model.forward(&mut g, &p, &batch, None).unwrap();
    let sr = model.sr_loss(&mut g, &out, &batch).unwrap().unwrap();
    assert!((g.item(sr) - 15f64.ln()).abs() < 1e-12);

    // Diagonal targets are masked out.
    let loss_with = |b: &Batch<f64>| {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let out = model.forward(&mut g, &p, b, None).unwrap();
        let s = model.sr_loss(&mut g, &out, b).unwrap().unwrap();
        g.item(s)
    };
    let mut flipped = batch.clone();
    let n = cfg.max_objects;
    let bins = flipped.rpe_bins.as_mut().unwrap();
    for b in 0..2 {
        for i in 0..n {
            for d in 0..3 {
                let c = &mut bins[((b * n + i) * n + i) * 3 + d];
                *c = 14 - *c;
            }
        }
    }
    assert_eq!(loss_with(&batch), loss_with(&flipped));

    // Perfect regression predictions give zero loss.
    let mut reg = cfg.clone();
    reg.sr_mode = SrMode::Regression;
    reg.sr_task = SrTask::Oce;
    let (m, ps) = Model::new::<f64>(&reg, 9).unwrap();
    let mut g = Graph::new();
    let p = ps.bind(&mut g);
    let mut out = m.forward(&mut g, &p, &batch, None).unwrap();
    out.sr_reg = Some(g.input(batch.oce.clone().unwrap()));
    let s = m.sr_loss(&mut g, &out, &batch).unwrap().unwrap();
    assert_eq!(g.item(s), 0.0);
}

#[test]
fn total_loss_is_linear_in_weights() {
    assert_eq!(total_loss(1.2, 0.4, 0.7, 0.3).unwrap(), 0.7 * 1.2 + 0.3 * 0.4);
    let one = total_loss(1.2, 0.4, 0.7, 0.3).unwrap() - 0.7 * 1.2;
    let two = total_loss(1.2, 0.4, 0.7, 0.6).unwrap() - 0.7 * 1.2;
    assert!((two - 2.0 * one).abs() < 1e-15);
    assert!(matches!(total_loss(f64::NAN, 0.1, 1.0, 1.0), Err(e) if e.is_numerical()));
}

#[test]
fn doubling_beta_doubles_sr_contribution() {
    let (ds, labels) = fixture(4);
    let mut cfg = full(small_cfg(&ds));
    cfg.use_patches = false;
    cfg.beta = 0.25;
    let data = prepare(&ds, &labels, &cfg).unwrap();
    let batch = batch_of::<f64>(&data, &cfg, &[0, 1]);
    let sr_part = |beta: f64| {
        let mut c = cfg.clone();
        c.beta = beta;
        let (m, ps) = Model::new::<f64>(&c, 10).unwrap();
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let out = m.forward(&mut g, &p, &batch, None).unwrap();
        let (vqa, _, total) = m.loss(&mut g, &out, &batch).unwrap();
        g.item(total) - c.alpha * g.item(vqa)
    };
    assert!((sr_part(0.5) - 2.0 * sr_part(0.25)).abs() < 1e-12);
}

#[test]
fn alpha_scales_only_vqa_gradients() {
    let (ds, labels) = fixture(4);
    let mut cfg = full(small_cfg(&ds));
    cfg.use_patches = false;
    let data = prepare(&ds, &labels, &cfg).unwrap();
    let batch = batch_of::<f64>(&data, &cfg, &[0, 1]);
    let grads = |alpha: f64| {
        let mut c = cfg.clone();
        c.alpha = alpha;
        let (m, ps) = Model::new::<f64>(&c, 12).unwrap();
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let out = m.forward(&mut g, &p, &batch, None).unwrap();
        let (_, _, total) = m.loss(&mut g, &out, &batch).unwrap();
        g.backward(total).unwrap();
        (ps.clone(), p.grads(&g))
    };
    let (ps, g1) = grads(1.0);
    let (_, g2) = grads(0.01);
    let vqa_w = ps.id("vqa.w").unwrap().0;
    for (a, b) in g1[vqa_w].iter().zip(&g2[vqa_w]) {
        assert!((b - 0.01 * a).abs() < 1e-12 * a.abs().max(1.0));
    }
    let head = ps.id("bin_pair.l2.w").unwrap().0;
    assert_eq!(g1[head], g2[head]);
}

#[test]
fn subsample_identity_determinism_and_errors() {
    let labels: Vec<String> = (0..1000).map(|i| format!("a{}", i % 7)).collect();
    assert_eq!(
        few_shot_subsample(&labels, 1.0, 3).unwrap(),
        (0..1000).collect::<Vec<_>>()
    );
    let a = few_shot_subsample(&labels, 0.1, 3).unwrap();
    assert_eq!(a.len(), 100);
    assert_eq!(a, few_shot_subsample(&labels, 0.1, 3).unwrap());
    assert_ne!(a, few_shot_subsample(&labels, 0.1, 4).unwrap());
    assert!(matches!(
        few_shot_subsample(&labels[..10], 0.01, 0),
        Err(ModelError::EmptySubset { .. })
    ));
    assert!(few_shot_subsample(&labels, 0.0, 0).is_err());
    assert!(few_shot_subsample(&labels, 1.5, 0).is_err());
}

#[test]
fn subsample_nesting_and_stratification() {
    let (ds, _) = fixture(400);
    let train: Vec<&str> = ds
        .qa
        .iter()
        .filter(|q| ds.splits.train.contains(&q.question_id))
        .map(|q| q.answer.as_str())
        .collect();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in &train {
        *counts.entry(a).or_default() += 1;
    }
    let fractions = [0.01, 0.05, 0.1, 0.25, 0.5, 1.0];
    let mut prev: Vec<usize> = Vec::new();
    for &f in &fractions {
        let sub = few_shot_subsample(&train, f, 9).unwrap();
        assert_eq!(sub.len(), (f * train.len() as f64).round() as usize);
        assert!(
            prev.iter().all(|i| sub.binary_search(i).is_ok()),
            "fraction {f} not nested"
        );
        let mut got: BTreeMap<&str, usize> = BTreeMap::new();
        for &i in &sub {
            *got.entry(train[i]).or_default() += 1;
        }
        for (a, &c) in &counts {
            let share = got.get(a).copied().unwrap_or(0) as f64;
            assert!(
                (share - f * c as f64).abs() <= 1.0 + 1e-9,
                "{a} at {f}: {share} vs {}",
                f * c as f64
            );
            if c as f64 >= 1.0 / f {
                assert!(share >= 1.0, "{a} lost at fraction {f}");
            }
        }
        prev = sub;
    }
}

#[test]
fn metrics_csv_columns() {
    let (ds, labels) = fixture(20);
    let cfg = small_cfg(&ds);
    let data = prepare(&ds, &labels, &cfg).unwrap();
    let tr = data.examples_for(&ds.splits.train).unwrap();
    let dev = data.examples_for(&ds.splits.dev).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 16,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &tc, &data, &tr, &dev, Some(dir.path())).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "epoch,split,vqa_acc,spatial_acc,vqa_loss,total_loss,consistency"
    );
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(csv, metrics_csv(&out.log, false));
    assert!(dir.path().join("best.ckpt").exists());

    let again = train(&cfg, &tc, &data, &tr, &dev, None).unwrap();
    assert_eq!(out.log, again.log);
    assert_eq!(out.params.tensors(), again.params.tensors());

    let sr = full(cfg.clone());
    let data = prepare(&ds, &labels, &sr).unwrap();
    let out = train(&sr, &tc, &data, &tr, &dev, None).unwrap();
    assert!(metrics_csv(&out.log, true).starts_with("epoch,split,vqa_acc,spatial_acc,sr_loss,"));
    assert!(out.log.iter().all(|r| r.sr_loss.is_some()));
}

#[test]
fn training_reduces_loss() {
    let (ds, labels) = fixture(120);
    let cfg = small_cfg(&ds);
    let data = prepare(&ds, &labels, &cfg).unwrap();
    let tr = data.examples_for(&ds.splits.train).unwrap();
    let dev = data.examples_for(&ds.splits.dev).unwrap();
    let mut decreased = 0;
    for seed in 0..3 {
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 16,
            seed,
            lr: 1e-3,
            ..Default::default()
        };
        let out = train(&cfg, &tc, &data, &tr, &dev, None).unwrap();
        let losses: Vec<f64> = out
            .log
            .iter()
            .filter(|r| r.split == "train")
            .map(|r| r.total_loss)
            .collect();
        decreased += usize::from(losses[2] < losses[0]);
    }
    assert!(decreased >= 2);
}

#[test]
fn min_steps_stretches_training_without_extra_dev_passes() {
    let (ds, labels) = fixture(20);
    let cfg = small_cfg(&ds);
    let data = prepare(&ds, &labels, &cfg).unwrap();
    let tr = data.examples_for(&ds.splits.train).unwrap();
    let dev = data.examples_for(&ds.splits.dev).unwrap();
    let per_epoch = tr.len().div_ceil(16);
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 16,
        min_steps: 5 * per_epoch + 1,
        ..Default::default()
    };
    let out = train(&cfg, &tc, &data, &tr, &dev, None).unwrap();
    assert_eq!(out.steps as usize, 6 * per_epoch);
    let epochs_of =
        |split: &str| -> Vec<usize> { out.log.iter().filter(|r| r.split == split).map(|r| r.epoch).collect() };
    assert_eq!(epochs_of("train"), (1..=6).collect::<Vec<_>>());
    assert_eq!(epochs_of("dev"), vec![3, 6]);
    assert!([3, 6].contains(&out.best_epoch));
}
