//! Built-in property, gradient and determinism checks.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde_json::json;
use sws_core::geometry::{make_bin_spec, SUPPORTED_BIN_COUNTS};
use sws_core::io::{generate_dataset, write_dataset, DatasetConfig};
use sws_core::labels::{read_labels, SRLabels, DEFAULT_LAMBDA};
use sws_core::patches::PyramidConfig;
use sws_core::scenegen::{Camera, SceneObject};
use sws_model::config::{ModelConfig, RelposInput, SrMode, SrTask, TrainConfig};
use sws_model::data::{make_batch, prepare};
use sws_model::{Model, ModelError};
use sws_nnkit::gradcheck::{grad_check, GradCheckOptions};
use sws_nnkit::{Bound, NnError};

use crate::error::{io_err, CliError, Result};
use crate::manifest::RunManifest;
use crate::pipeline::{build_label_files, label_file, run_experiment, with_vocab};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

/// Bin edges, round trips and sign fidelity for every supported `C`.
pub fn binning() -> Result<Check> {
    let mut problems = Vec::new();
    for c in SUPPORTED_BIN_COUNTS {
        let spec = make_bin_spec(DEFAULT_LAMBDA, c).map_err(num)?;
        if spec.edges.first() != Some(&-1.0) || spec.edges.last() != Some(&1.0) {
            problems.push(format!("C={c}: edges do not span [-1, 1]"));
        }
        for k in 0..c {
            let mid = spec.dequantize(k).map_err(num)?;
            if spec.quantize(mid).map_err(num)? != k {
                problems.push(format!("C={c}: class {k} does not round-trip"));
            }
        }
        let zero = spec.zero_bin();
        let n = 10_000;
        for i in 0..=n {
            let v = -1.0 + 2.0 * i as f64 / n as f64;
            let k = spec.quantize(v).map_err(num)?;
            if k != zero && (k < zero) != (v < 0.0) {
                problems.push(format!("C={c}: {v} lands in class {k} across the center"));
                break;
            }
        }
    }
    Ok(check("binning", problems.is_empty(), problems.join("; ")))
}

/// Image-plane center of an object's projected box, in closed form: over an
/// axis-aligned box in front of a pinhole camera, `x/z` is extreme at the
/// near or far face depending on the sign of `x`.
fn analytic_center(o: &SceneObject, cam: &Camera) -> [f64; 2] {
    let (lo, hi) = o.aabb();
    let (near, far) = (lo[2], hi[2]);
    let size = [cam.width_px as f64, cam.height_px as f64];
    let mut c = [0.0; 2];
    for a in 0..2 {
        let min = lo[a] / if lo[a] >= 0.0 { far } else { near };
        let max = hi[a] / if hi[a] >= 0.0 { near } else { far };
        let px = |t: f64| (cam.focal_px * t + cam.principal[a]).clamp(0.0, size[a]) / size[a];
        c[a] = 0.5 * (px(min) + px(max));
    }
    c
}

/// Label centroids against the scene geometry: x/y match the analytic
/// projection and depth order survives for well-separated pairs.
pub fn geometry(ds: &sws_core::io::Dataset, labels: &[SRLabels]) -> Result<Check> {
    let (mut worst_xy, mut agree, mut pairs) = (0.0f64, 0usize, 0usize);
    for (scene, l) in ds.scenes.iter().zip(labels) {
        let n = l.num_objects();
        for i in 0..n {
            let want = analytic_center(&scene.objects[i], &scene.camera);
            for (d, w) in want.iter().enumerate() {
                worst_xy = worst_xy.max((l.oce_at(i, d) as f64 - w).abs());
            }
            for j in i + 1..n {
                let (zi, zj) = (scene.objects[i].center_m[2], scene.objects[j].center_m[2]);
                if (zi - zj).abs() >= 0.2 * scene.room_depth_m {
                    pairs += 1;
                    agree += usize::from((l.oce_at(i, 2) < l.oce_at(j, 2)) == (zi < zj));
                }
            }
        }
    }
    let rank = if pairs == 0 { 1.0 } else { agree as f64 / pairs as f64 };
    Ok(check(
        "geometry",
        worst_xy < 0.02 && rank >= 0.95,
        format!("max x/y error {worst_xy:.2e}, depth rank agreement {rank:.4} over {pairs} pairs"),
    ))
}

/// `rpe` antisymmetry, zero diagonal, and bins equal to quantized offsets.
pub fn antisymmetry(labels: &[SRLabels]) -> Result<Check> {
    let mut bad = 0usize;
    for l in labels {
        let (n, d) = (l.num_objects(), l.dims);
        for i in 0..n {
            for j in 0..n {
                for k in 0..d {
                    let v = l.rpe_at(i, j, k);
                    if v != -l.rpe_at(j, i, k) || (i == j && v != 0.0) {
                        bad += 1;
                    }
                    for (&c, spec) in &l.bin_specs {
                        let q = spec.quantize(v).map_err(num)?;
                        if l.bin_at(c, i, j, k) != Some(q as u16) {
                            bad += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(check(
        "antisymmetry",
        bad == 0,
        format!("{bad} violating cells in {} files", labels.len()),
    ))
}

fn tiny_model(ds: &sws_core::io::Dataset) -> ModelConfig {
    with_vocab(
        ModelConfig {
            hidden: 8,
            heads: 2,
            ffn_mult: 2,
            lang_layers: 1,
            visual_layers: 1,
            cross_layers: 1,
            fusion_layers: 1,
            sr_task: SrTask::Rpe,
            sr_mode: SrMode::Bins(15),
            relpos_input: RelposInput::Early,
            use_patches: true,
            pyramid: PyramidConfig {
                scales: vec![2],
                patch_side: 2,
                ..Default::default()
            },
            alpha: 0.7,
            beta: 0.3,
            ..Default::default()
        },
        ds,
    )
}

/// Finite-difference check of the full model loss at 64-bit.
pub fn gradients(ds: &sws_core::io::Dataset, labels: &HashMap<String, SRLabels>) -> Result<Check> {
    let cfg = tiny_model(ds);
    let data = prepare(ds, labels, &cfg)?;
    let batch = make_batch::<f64>(&data, &[0, 1], &cfg)?;
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let (model, params) = Model::new::<f64>(&cfg, seed)?;
        let err = grad_check(
            params.tensors(),
            |g, vars| {
                let p = Bound::from(vars.to_vec());
                let out = model.forward(g, &p, &batch, None).map_err(nn)?;
                Ok(model.loss(g, &out, &batch).map_err(nn)?.2)
            },
            GradCheckOptions {
                seed,
                fraction: 0.1,
                ..Default::default()
            },
        )?;
        worst = worst.max(err);
    }
    Ok(check(
        "gradients",
        worst < 1e-4,
        format!("max relative error {worst:.2e} over 3 seeds"),
    ))
}

/// Two label builds and two short training runs from the same seeds.
pub fn determinism(ds: &sws_core::io::Dataset, work: &Path) -> Result<Check> {
    let data_dir = work.join("data");
    write_dataset(ds, &data_dir)?;
    let mut label_bytes = Vec::new();
    for run in ["labels_a", "labels_b"] {
        let out = work.join(run);
        build_label_files(
            &data_dir.join("scenes"),
            &data_dir.join("depth"),
            &out,
            3,
            &[15],
            DEFAULT_LAMBDA,
        )?;
        let mut files = Vec::new();
        for s in &ds.scenes {
            let p = label_file(&out, &s.scene_id);
            files.push(fs::read(&p).map_err(|e| io_err(&p, e))?);
        }
        label_bytes.push(files);
    }
    let labels_same = label_bytes[0] == label_bytes[1];

    let labels: HashMap<String, SRLabels> = ds
        .scenes
        .iter()
        .map(|s| {
            Ok((
                s.scene_id.clone(),
                read_labels(&label_file(&work.join("labels_a"), &s.scene_id))?,
            ))
        })
        .collect::<Result<_>>()?;
    let cfg = tiny_model(ds);
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 8,
        seed: 5,
        ..Default::default()
    };
    let mut logs = Vec::new();
    for run in ["train_a", "train_b"] {
        let out = work.join(run);
        run_experiment(ds, &labels, &cfg, &tc, "selftest", Some(&out))?;
        let p = out.join("metrics.csv");
        logs.push(fs::read(&p).map_err(|e| io_err(&p, e))?);
    }
    let logs_same = logs[0] == logs[1];
    Ok(check(
        "determinism",
        labels_same && logs_same,
        format!("label files identical: {labels_same}, metric logs identical: {logs_same}"),
    ))
}

/// Runs every check, printing one line each. Fails with a numerical error
/// if any check fails.
pub fn run(work: Option<&Path>) -> Result<Vec<Check>> {
    let tmp;
    let work = match work {
        Some(p) => {
            fs::create_dir_all(p).map_err(|e| io_err(p, e))?;
            p.to_path_buf()
        }
        None => {
            tmp = tempfile::tempdir().map_err(|e| io_err(Path::new("temporary directory"), e))?;
            tmp.path().to_path_buf()
        }
    };
    let cfg = DatasetConfig {
        n_scenes: 24,
        seed: 7,
        ..Default::default()
    };
    let ds = generate_dataset(&cfg)?;
    let label_list = sws_core::labels::dataset_labels(&ds, 3, &SUPPORTED_BIN_COUNTS, DEFAULT_LAMBDA)?;
    let label_map: HashMap<String, SRLabels> = label_list.iter().map(|l| (l.scene_id.clone(), l.clone())).collect();

    let checks = vec![
        binning()?,
        geometry(&ds, &label_list)?,
        antisymmetry(&label_list)?,
        gradients(&ds, &label_map)?,
        determinism(&ds, &work)?,
    ];
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let summary: Vec<_> = checks
        .iter()
        .map(|c| json!({"name": c.name, "passed": c.passed, "detail": c.detail}))
        .collect();
    let mut m = RunManifest::new("selftest", json!({"dataset": cfg, "checks": summary}), vec![cfg.seed]);
    m.output(&work);
    m.write(&work.join("manifest.json"))?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(checks)
    } else {
        Err(CliError::Numerical(format!("selftest failed: {}", failed.join(", "))))
    }
}

fn num(e: sws_core::geometry::GeometryError) -> CliError {
    CliError::Numerical(e.to_string())
}

fn nn(e: ModelError) -> NnError {
    match e {
        ModelError::Nn(e) => e,
        other => NnError::Contract(other.to_string()),
    }
}
