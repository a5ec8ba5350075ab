//! Joint VQA + SR optimization, evaluation and few-shot subsampling.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sws_core::evalkit::{
    bin_accuracy, consistency_audit, sr_mse, vqa_accuracy, AuditResult, EvalReport, Prediction, QuestionFilter,
    SrPrediction,
};
use sws_core::geometry::{make_bin_spec, BinSpec};
use sws_nnkit::checkpoint::{write_checkpoint, CheckpointHeader};
use sws_nnkit::{adam_step, AdamState, Graph, ParamStore, Scalar};

use crate::config::{ModelConfig, SrMode, SrTask, TrainConfig};
use crate::data::{make_batch, PreparedData};
use crate::error::{ModelError, Result};
use crate::model::{Model, Outputs};

/// `α·l_vqa + β·l_sr`.
pub fn total_loss(l_vqa: f64, l_sr: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !l_vqa.is_finite() || !l_sr.is_finite() || l_vqa < 0.0 || l_sr < 0.0 {
        return Err(ModelError::Numerical(format!(
            "losses must be finite and non-negative: {l_vqa}, {l_sr}"
        )));
    }
    Ok(alpha * l_vqa + beta * l_sr)
}

/// Deterministic subset of `round(fraction·n)` indices, stratified by label.
///
/// Items of each label are shuffled once per seed and given keys
/// `(rank + 0.5) / count`; the subset is the prefix of the key order, so a
/// smaller fraction always selects a subset of a larger one.
pub fn few_shot_subsample<S: AsRef<str>>(labels: &[S], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ModelError::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let k = (fraction * labels.len() as f64).round() as usize;
    if k == 0 {
        return Err(ModelError::EmptySubset {
            fraction,
            total: labels.len(),
        });
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.as_ref()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfe57_0a11);
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(labels.len());
    for (g, (_, items)) in groups.iter_mut().enumerate() {
        items.shuffle(&mut rng);
        let n = items.len() as f64;
        keyed.extend(items.iter().enumerate().map(|(r, &i)| ((r as f64 + 0.5) / n, g, i)));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = keyed[..k].iter().map(|&(_, _, i)| i).collect();
    out.sort_unstable();
    Ok(out)
}

/// One row of the per-epoch metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub vqa_acc: f64,
    pub spatial_acc: f64,
    pub sr_loss: Option<f64>,
    pub vqa_loss: f64,
    pub total_loss: f64,
    pub consistency: Option<f64>,
}

/// Metrics CSV; the `sr_loss` column is present only when an SR task is trained.
pub fn metrics_csv(rows: &[MetricRow], with_sr: bool) -> String {
    let mut out = String::from(if with_sr {
        "epoch,split,vqa_acc,spatial_acc,sr_loss,vqa_loss,total_loss,consistency\n"
    } else {
        "epoch,split,vqa_acc,spatial_acc,vqa_loss,total_loss,consistency\n"
    });
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},",
            r.epoch, r.split, r.vqa_acc, r.spatial_acc
        ));
        if with_sr {
            out.push_str(&format!("{},", opt(r.sr_loss)));
        }
        out.push_str(&format!(
            "{:.6},{:.6},{}\n",
            r.vqa_loss,
            r.total_loss,
            opt(r.consistency)
        ));
    }
    out
}

/// Everything an evaluation pass produces.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub predictions: Vec<Prediction>,
    pub vqa_loss: f64,
    pub sr_loss: Option<f64>,
    pub total_loss: f64,
    pub vqa_acc: f64,
    pub spatial_acc: f64,
    pub open_acc: f64,
    pub binary_acc: f64,
    pub sr_mse: Option<f64>,
    pub bin_accuracy: Option<(usize, f64)>,
    pub audit: Option<AuditResult>,
}

impl Evaluation {
    pub fn report(&self, split: &str, method: &str) -> EvalReport {
        let audit = self.audit.as_ref();
        EvalReport {
            split: split.to_string(),
            method: method.to_string(),
            n_questions: self.predictions.len(),
            vqa_accuracy: self.vqa_acc,
            spatial_accuracy: self.spatial_acc,
            open_accuracy: self.open_acc,
            binary_accuracy: self.binary_acc,
            sr_mse: self.sr_mse,
            bin_accuracy: self.bin_accuracy.into_iter().collect(),
            consistency_rate: audit.map_or(0.0, |a| a.consistency_rate),
            inconsistency_rate: audit.map_or(0.0, |a| a.inconsistency_rate),
            audited: audit.map_or(0, |a| a.consistent + a.inconsistent),
        }
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Bin spec used for the model's SR outputs, if it predicts bins.
pub fn model_bin_spec(cfg: &ModelConfig) -> Result<Option<BinSpec>> {
    match cfg.sr_mode {
        SrMode::Bins(c) if cfg.sr_task != SrTask::None => Ok(Some(
            make_bin_spec(cfg.bin_lambda, c).map_err(|e| ModelError::Config(e.to_string()))?,
        )),
        _ => Ok(None),
    }
}

fn sr_prediction<T: Scalar>(
    g: &Graph<T>,
    out: &Outputs,
    cfg: &ModelConfig,
    spec: Option<&BinSpec>,
    bi: usize,
    s: usize,
    o: usize,
    ids: (&str, &str),
) -> Option<SrPrediction> {
    let (n, d) = (cfg.max_objects, cfg.dims);
    let mut delta = None;
    let mut bins = None;
    if let Some(r) = out.rpe_reg {
        let row = g.value(r).row((bi * n + s) * n + o);
        delta = Some(row.iter().map(|v| v.to_f64_lossy() as f32).collect());
    } else if let Some(logits) = out.bin_pair {
        let v = g.value(logits);
        bins = Some(
            (0..d)
                .map(|dd| argmax(v.row(((bi * n + s) * n + o) * d + dd)) as u16)
                .collect(),
        );
    } else if let (Some(logits), Some(spec)) = (out.bin_object, spec) {
        let v = g.value(logits);
        let mid = |k: usize, dd: usize| spec.dequantize(argmax(v.row((bi * n + k) * d + dd))).unwrap_or(0.0);
        delta = Some((0..d).map(|dd| (mid(s, dd) - mid(o, dd)) as f32).collect());
    } else {
        return None;
    }
    Some(SrPrediction {
        subject_id: ids.0.to_string(),
        object_id: ids.1.to_string(),
        delta,
        bins,
    })
}

/// Forward passes over `ids` in batches; predictions, losses, accuracies,
/// SR metrics and the consistency audit.
pub fn evaluate<T: Scalar>(
    model: &Model,
    params: &ParamStore<T>,
    data: &PreparedData,
    ids: &[usize],
    batch_size: usize,
) -> Result<Evaluation> {
    let cfg = &model.cfg;
    let (n, d) = (cfg.max_objects, cfg.dims);
    let spec = model_bin_spec(cfg)?;
    let mut predictions = Vec::with_capacity(ids.len());
    let (mut vqa_sum, mut sr_sum, mut total_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
    let (mut reg_pred, mut reg_tgt, mut reg_mask) = (Vec::new(), Vec::new(), Vec::new());
    let (mut bin_pred, mut bin_tgt, mut bin_mask) = (Vec::new(), Vec::new(), Vec::new());
    for chunk in ids.chunks(batch_size.max(1)) {
        let batch = make_batch::<T>(data, chunk, cfg)?;
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let out = model.forward(&mut g, &p, &batch, None)?;
        let (vqa, sr, total) = model.loss(&mut g, &out, &batch)?;
        vqa_sum += g.item(vqa).to_f64_lossy() * chunk.len() as f64;
        total_sum += g.item(total).to_f64_lossy() * chunk.len() as f64;
        if let Some(s) = sr {
            sr_sum += g.item(s).to_f64_lossy() * chunk.len() as f64;
        }
        batches += chunk.len();

        if let (Some(r), Some(t)) = (out.rpe_reg, &batch.rpe) {
            reg_pred.extend(g.value(r).data().iter().map(|v| v.to_f64_lossy() as f32));
            reg_tgt.extend(t.data().iter().map(|v| v.to_f64_lossy() as f32));
            reg_mask.extend(batch.pair_cell_mask(n, d));
        } else if let (Some(r), Some(t)) = (out.sr_reg, &batch.oce) {
            reg_pred.extend(g.value(r).data().iter().map(|v| v.to_f64_lossy() as f32));
            reg_tgt.extend(t.data().iter().map(|v| v.to_f64_lossy() as f32));
            reg_mask.extend(batch.object_cell_mask(d));
        }
        if let (Some(l), Some(t)) = (out.bin_pair, &batch.rpe_bins) {
            let v = g.value(l);
            bin_pred.extend((0..v.shape()[0]).map(|r| argmax(v.row(r)) as u16));
            bin_tgt.extend_from_slice(t);
            bin_mask.extend(batch.pair_cell_mask(n, d));
        } else if let (Some(l), Some(t)) = (out.bin_object, &batch.oce_bins) {
            let v = g.value(l);
            bin_pred.extend((0..v.shape()[0]).map(|r| argmax(v.row(r)) as u16));
            bin_tgt.extend_from_slice(t);
            bin_mask.extend(batch.object_cell_mask(d));
        }

        let logits = g.value(out.vqa_logits);
        for (bi, &e) in chunk.iter().enumerate() {
            let ex = &data.examples[e];
            let answer = cfg.answer_vocab[argmax(logits.row(bi))].clone();
            let sr = match (ex.subject_slot, ex.object_slot) {
                (Some(s), Some(o)) => {
                    let sc = &data.scenes[ex.scene];
                    sr_prediction(
                        &g,
                        &out,
                        cfg,
                        spec.as_ref(),
                        bi,
                        s,
                        o,
                        (&sc.object_ids[s], &sc.object_ids[o]),
                    )
                }
                _ => None,
            };
            predictions.push(Prediction {
                question_id: ex.question_id.clone(),
                answer,
                sr,
            });
        }
    }
    if batches == 0 {
        return Err(ModelError::Data("nothing to evaluate".into()));
    }
    let gold: Vec<_> = ids.iter().map(|&e| data.examples[e].item.clone()).collect();
    let answers: Vec<String> = predictions.iter().map(|p| p.answer.clone()).collect();
    let acc = |f| vqa_accuracy(&answers, &gold, f).unwrap_or(0.0);
    let has_sr = cfg.sr_task != SrTask::None;
    Ok(Evaluation {
        vqa_loss: vqa_sum / batches as f64,
        sr_loss: has_sr.then(|| sr_sum / batches as f64),
        total_loss: total_sum / batches as f64,
        vqa_acc: acc(QuestionFilter::All),
        spatial_acc: acc(QuestionFilter::Spatial),
        open_acc: acc(QuestionFilter::Open),
        binary_acc: acc(QuestionFilter::Binary),
        sr_mse: (!reg_pred.is_empty())
            .then(|| sr_mse(&reg_pred, &reg_tgt, &reg_mask))
            .transpose()?,
        bin_accuracy: match (cfg.sr_mode.classes(), bin_pred.is_empty()) {
            (Some(c), false) => Some((c, bin_accuracy(&bin_pred, &bin_tgt, &bin_mask)?)),
            _ => None,
        },
        audit: has_sr.then(|| consistency_audit(&gold, &predictions, spec.as_ref())),
        predictions,
    })
}

/// Result of a training run: the best-dev parameters and the metrics log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub params: ParamStore<f32>,
    pub best_epoch: usize,
    pub steps: u64,
    pub log: Vec<MetricRow>,
    pub header: CheckpointHeader,
}

fn checkpoint_header(model: &Model, tc: &TrainConfig, step: u64, epoch: usize, dev: &MetricRow) -> CheckpointHeader {
    CheckpointHeader {
        config_hash: model.cfg.hash(),
        seeds: vec![tc.seed],
        step,
        dtype: String::new(),
        params: Vec::new(),
        extra: serde_json::json!({
            "model_config": model.cfg,
            "train_config": tc,
            "epoch": epoch,
            "dev": dev,
        }),
    }
}

fn is_better(cand: &MetricRow, best: Option<&MetricRow>) -> bool {
    match best {
        None => true,
        Some(b) => {
            cand.vqa_acc > b.vqa_acc
                || (cand.vqa_acc == b.vqa_acc && cand.sr_loss.unwrap_or(0.0) < b.sr_loss.unwrap_or(0.0))
        }
    }
}

/// Trains on `train_ids`, selects the epoch with the best dev accuracy and
/// optionally writes `best.ckpt` and `metrics.csv` into `out_dir` as it goes.
/// Every epoch logs a train row; dev rows follow evaluated epochs only.
pub fn train(
    model_cfg: &ModelConfig,
    tc: &TrainConfig,
    data: &PreparedData,
    train_ids: &[usize],
    dev_ids: &[usize],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    let (model, mut params) = Model::new::<f32>(model_cfg, tc.seed)?;
    if train_ids.is_empty() || dev_ids.is_empty() {
        return Err(ModelError::Data("train and dev splits must be non-empty".into()));
    }
    let mut adam = AdamState::new(&params, tc.lr);
    let batches_per_epoch = train_ids.len().div_ceil(tc.batch_size);
    let epochs = tc.epochs.max(tc.min_steps.div_ceil(batches_per_epoch));
    // Runs stretched by `min_steps` still see dev about `tc.epochs` times.
    let eval_every = epochs.div_ceil(tc.epochs.max(1));
    let with_sr = model_cfg.sr_task != SrTask::None;
    let mut order = train_ids.to_vec();
    let mut log = Vec::new();
    let mut best: Option<(MetricRow, ParamStore<f32>, usize)> = None;
    let mut step = 0u64;
    for epoch in 1..=epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let (mut vqa_sum, mut sr_sum, mut total_sum, mut hits, mut spatial_hits, mut spatial_n) =
            (0.0, 0.0, 0.0, 0usize, 0usize, 0usize);
        for chunk in order.chunks(tc.batch_size) {
            let batch = make_batch::<f32>(data, chunk, &model.cfg)?;
            let mut g = Graph::<f32>::with_seed(tc.seed ^ step);
            let p = params.bind(&mut g);
            let dropout_seed = (model.cfg.dropout > 0.0).then_some(tc.seed ^ step.wrapping_mul(0x9e37));
            let out = model.forward(&mut g, &p, &batch, dropout_seed)?;
            let (vqa, sr, total) = model.loss(&mut g, &out, &batch)?;
            let t = g.item(total) as f64;
            if !t.is_finite() {
                return Err(ModelError::Numerical(format!("loss is {t} at step {step}")));
            }
            let w = chunk.len() as f64;
            total_sum += t * w;
            vqa_sum += g.item(vqa) as f64 * w;
            if let Some(s) = sr {
                sr_sum += g.item(s) as f64 * w;
            }
            let logits = g.value(out.vqa_logits);
            for (bi, &e) in chunk.iter().enumerate() {
                let ex = &data.examples[e];
                let ok = argmax(logits.row(bi)) == ex.answer;
                hits += usize::from(ok);
                if ex.is_spatial {
                    spatial_n += 1;
                    spatial_hits += usize::from(ok);
                }
            }
            g.backward(total)?;
            let grads = p.grads(&g);
            adam_step(&mut params, &grads, &mut adam)?;
            step += 1;
        }
        let n = train_ids.len() as f64;
        log.push(MetricRow {
            epoch,
            split: "train".into(),
            vqa_acc: hits as f64 / n,
            spatial_acc: if spatial_n == 0 {
                0.0
            } else {
                spatial_hits as f64 / spatial_n as f64
            },
            sr_loss: with_sr.then_some(sr_sum / n),
            vqa_loss: vqa_sum / n,
            total_loss: total_sum / n,
            consistency: None,
        });
        if epoch % eval_every != 0 && epoch != epochs {
            continue;
        }
        let ev = evaluate(&model, &params, data, dev_ids, 64)?;
        let dev = MetricRow {
            epoch,
            split: "dev".into(),
            vqa_acc: ev.vqa_acc,
            spatial_acc: ev.spatial_acc,
            sr_loss: ev.sr_loss,
            vqa_loss: ev.vqa_loss,
            total_loss: ev.total_loss,
            consistency: ev.audit.as_ref().map(|a| a.consistency_rate),
        };
        log.push(dev.clone());
        if is_better(&dev, best.as_ref().map(|b| &b.0)) {
            if let Some(dir) = out_dir {
                write_checkpoint(
                    &dir.join("best.ckpt"),
                    &checkpoint_header(&model, tc, step, epoch, &dev),
                    &params,
                )?;
            }
            best = Some((dev, params.clone(), epoch));
        }
        if let Some(dir) = out_dir {
            let path = dir.join("metrics.csv");
            std::fs::write(&path, metrics_csv(&log, with_sr)).map_err(|source| {
                ModelError::Io(sws_core::io::DataError::Io {
                    path: path.display().to_string(),
                    source,
                })
            })?;
        }
    }
    let (dev, params, best_epoch) = best.expect("at least one epoch ran");
    let header = checkpoint_header(&model, tc, step, best_epoch, &dev);
    Ok(TrainOutcome {
        model,
        params,
        best_epoch,
        steps: step,
        log,
        header,
    })
}
