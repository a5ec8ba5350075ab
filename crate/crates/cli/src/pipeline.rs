//! Shared building blocks for the subcommands: label files, config
//! presets, and a train-then-evaluate run.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sws_core::evalkit::{EvalReport, Prediction};
use sws_core::io::{read_depth, read_json, write_json, write_jsonl, Dataset};
use sws_core::labels::{dataset_depth_max, read_labels, scene_labels, write_labels, SRLabels};
use sws_core::scenegen::{answer_vocabulary, Scene};
use sws_model::config::{ModelConfig, RelposInput, SrMode, SrTask, TrainConfig};
use sws_model::data::{prepare, question_vocabulary, PreparedData};
use sws_model::train::{evaluate, few_shot_subsample, train, Evaluation, TrainOutcome};

use crate::error::{io_err, CliError, Result};

/// Optimizer steps every few-shot run gets at least, so tiny subsets are
/// not judged after a handful of updates.
pub const FEWSHOT_MIN_STEPS: usize = 1500;

pub fn label_file(dir: &Path, scene_id: &str) -> PathBuf {
    dir.join(format!("{scene_id}.srlb"))
}

/// Builds one label file per scene from `scenes/<id>.json` and
/// `depth/<id>.dpth`, normalizing by the maximum over all depth files.
pub fn build_label_files(
    scenes_dir: &Path,
    depth_dir: &Path,
    out: &Path,
    dims: usize,
    bins: &[usize],
    lambda: f64,
) -> Result<Vec<PathBuf>> {
    let ids = json_stems(scenes_dir)?;
    if ids.is_empty() {
        return Err(CliError::Data(format!("{}: no scene files", scenes_dir.display())));
    }
    let scene_file = |id: &str| scenes_dir.join(format!("{id}.json"));
    let depth_file = |id: &str| depth_dir.join(format!("{id}.dpth"));
    let depth_paths: Vec<PathBuf> = ids.iter().map(|id| depth_file(id)).collect();
    let global_max = dataset_depth_max(&depth_paths)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    ids.par_iter()
        .map(|id| -> Result<PathBuf> {
            let scene: Scene = read_json(&scene_file(id))?;
            let depth = read_depth(&depth_file(id))?;
            let labels = scene_labels(&scene, &depth, global_max, dims, bins, lambda)?;
            let path = label_file(out, id);
            write_labels(&labels, &path)?;
            Ok(path)
        })
        .collect()
}

/// Sorted stems of the `*.json` files in `dir`.
fn json_stems(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Reads the label file of every scene in `ds`.
pub fn load_labels(dir: &Path, ds: &Dataset) -> Result<HashMap<String, SRLabels>> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("{}: labels directory not found", dir.display())));
    }
    ds.scenes
        .par_iter()
        .map(|s| Ok((s.scene_id.clone(), read_labels(&label_file(dir, &s.scene_id))?)))
        .collect()
}

/// Fills empty vocabularies from the dataset.
pub fn with_vocab(mut cfg: ModelConfig, ds: &Dataset) -> ModelConfig {
    if cfg.question_vocab.is_empty() {
        cfg.question_vocab = question_vocabulary(&ds.qa);
    }
    if cfg.answer_vocab.is_empty() {
        cfg.answer_vocab = if ds.header.answer_vocab.is_empty() {
            answer_vocabulary()
        } else {
            ds.header.answer_vocab.clone()
        };
    }
    cfg
}

/// Shared size of the presets: one layer per stack at `H = 32`, small
/// enough for three seeds of every preset on one CPU core.
pub fn compact_config() -> ModelConfig {
    ModelConfig {
        hidden: 32,
        heads: 4,
        lang_layers: 1,
        visual_layers: 1,
        cross_layers: 1,
        fusion_layers: 1,
        ..ModelConfig::default()
    }
}

/// VQA-only model without relative-position input or patches.
pub fn baseline_config() -> ModelConfig {
    ModelConfig {
        sr_task: SrTask::None,
        relpos_input: RelposInput::None,
        use_patches: false,
        ..compact_config()
    }
}

/// RPE bin classification (C = 15), early relative-position fusion,
/// patches on, `(α, β) = (0.7, 0.3)`.
pub fn sr_config() -> ModelConfig {
    ModelConfig {
        sr_task: SrTask::Rpe,
        sr_mode: SrMode::Bins(15),
        relpos_input: RelposInput::Early,
        use_patches: true,
        alpha: 0.7,
        beta: 0.3,
        ..compact_config()
    }
}

/// RPE supervision without depth-derived inputs; the audit's comparison
/// point for a model that has SR outputs but no spatial input.
pub fn weak_spatial_config() -> ModelConfig {
    ModelConfig {
        sr_task: SrTask::Rpe,
        sr_mode: SrMode::Bins(15),
        relpos_input: RelposInput::None,
        use_patches: false,
        alpha: 0.7,
        beta: 0.3,
        ..compact_config()
    }
}

/// Named preset lookup for `--method` style flags.
pub fn preset(name: &str) -> Option<ModelConfig> {
    match name {
        "baseline" => Some(baseline_config()),
        "sr" => Some(sr_config()),
        "weak_spatial" => Some(weak_spatial_config()),
        _ => None,
    }
}

/// Everything a single training run produces.
pub struct RunOutput {
    pub outcome: TrainOutcome,
    pub train_size: usize,
    pub iid: Evaluation,
    pub ood: Evaluation,
}

impl RunOutput {
    pub fn reports(&self, method: &str) -> Vec<EvalReport> {
        vec![self.iid.report("test_iid", method), self.ood.report("test_ood", method)]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunSummary {
    method: String,
    best_epoch: usize,
    steps: u64,
    train_size: usize,
    reports: Vec<EvalReport>,
}

/// Training ids after the few-shot subsample of `tc.fraction`.
pub fn train_subset(data: &PreparedData, ds: &Dataset, tc: &TrainConfig) -> Result<Vec<usize>> {
    let all = data.examples_for(&ds.splits.train)?;
    if tc.fraction >= 1.0 {
        return Ok(all);
    }
    let answers: Vec<&str> = all.iter().map(|&i| data.examples[i].item.answer.as_str()).collect();
    let keep = few_shot_subsample(&answers, tc.fraction, tc.seed)?;
    Ok(keep.into_iter().map(|k| all[k]).collect())
}

/// Trains on the (possibly subsampled) train split, selects on dev, and
/// evaluates the best parameters on both test splits. With `out`, writes the
/// checkpoint, metrics log, predictions and reports there.
pub fn run_experiment(
    ds: &Dataset,
    labels: &HashMap<String, SRLabels>,
    model_cfg: &ModelConfig,
    tc: &TrainConfig,
    method: &str,
    out: Option<&Path>,
) -> Result<RunOutput> {
    let cfg = with_vocab(model_cfg.clone(), ds);
    let data = prepare(ds, labels, &cfg)?;
    let train_ids = train_subset(&data, ds, tc)?;
    let dev_ids = data.examples_for(&ds.splits.dev)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let outcome = train(&cfg, tc, &data, &train_ids, &dev_ids, out)?;
    let eval = |ids: &[String]| -> Result<Evaluation> {
        let ids = data.examples_for(ids)?;
        Ok(evaluate(&outcome.model, &outcome.params, &data, &ids, 64)?)
    };
    let iid = eval(&ds.splits.test_iid)?;
    let ood = eval(&ds.splits.test_ood)?;
    let run = RunOutput {
        train_size: train_ids.len(),
        outcome,
        iid,
        ood,
    };
    if let Some(dir) = out {
        write_predictions(&run.iid.predictions, &dir.join("pred_test_iid.jsonl"))?;
        write_predictions(&run.ood.predictions, &dir.join("pred_test_ood.jsonl"))?;
        let summary = RunSummary {
            method: method.to_string(),
            best_epoch: run.outcome.best_epoch,
            steps: run.outcome.steps,
            train_size: run.train_size,
            reports: run.reports(method),
        };
        write_json(&summary, &dir.join("summary.json"))?;
    }
    Ok(run)
}

pub fn write_predictions(preds: &[Prediction], path: &Path) -> Result<()> {
    Ok(write_jsonl(preds, path)?)
}

/// Parses `"3,7,15"`-style lists.
pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad {what} entry {p:?}")))
        })
        .collect()
}
