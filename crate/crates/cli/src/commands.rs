//! Subcommand definitions and handlers.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sws_core::evalkit::{
    bin_accuracy, consistency_audit, emit_reports, fewshot_csv, sr_mse, vqa_accuracy, EvalReport, FewShotPoint,
    Prediction, QuestionFilter, ReportFormat,
};
use sws_core::geometry::make_bin_spec;
use sws_core::io::{generate_dataset, read_dataset, read_json, read_jsonl, write_dataset, write_json, DatasetConfig};
use sws_core::labels::{read_labels, DEFAULT_LAMBDA};
use sws_core::scenegen::QAItem;
use sws_model::config::{ModelConfig, SrTask, TrainConfig, PRETRAINED_LR};

use crate::error::{io_err, CliError, Result};
use crate::manifest::RunManifest;
use crate::pipeline::{self, label_file, load_labels, parse_list, run_experiment, with_vocab};

#[derive(Debug, Parser)]
#[command(name = "sws", version, about = "Synthetic spatial-reasoning VQA pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate scenes, depth maps, questions and splits.
    Gen(GenArgs),
    /// Build weak-supervision label files from scenes and depth maps.
    Labels(LabelsArgs),
    /// Train a model and evaluate its best-dev checkpoint on the test splits.
    Train(TrainArgs),
    /// Score a prediction file against gold questions and label files.
    Eval(EvalArgs),
    /// Check agreement between spatial answers and predicted offsets.
    Audit(AuditArgs),
    /// Train on nested subsets of the train split and emit a CSV curve.
    Fewshot(FewshotArgs),
    /// Merge evaluation reports into one JSON or CSV table.
    Report(ReportArgs),
    /// Run the built-in property, gradient and determinism checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Dataset config JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub objects: Option<usize>,
    #[arg(long)]
    pub questions_per_scene: Option<usize>,
    #[arg(long)]
    pub ood_shift: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LabelsArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub depth: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub dims: usize,
    /// Comma-separated bin counts.
    #[arg(long, default_value = "3,7,15,30")]
    pub bins: String,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Model config JSON, or a preset name: baseline, sr, weak_spatial.
    #[arg(long, default_value = "sr")]
    pub model_config: String,
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Label directory; defaults to `<data>/labels`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Use the learning rate meant for pretrained initialization.
    #[arg(long, conflicts_with = "lr")]
    pub pretrained_lr: bool,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub min_steps: Option<usize>,
    /// Method name recorded in reports.
    #[arg(long)]
    pub method: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    /// Gold questions (`qa.jsonl`).
    #[arg(long)]
    pub gold: PathBuf,
    /// Label directory for SR metrics.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Bin count of the predicted classes (also sets the audit's abstain band).
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value = "model")]
    pub method: String,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Audit result with per-question verdicts.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FewshotArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value = "0.01,0.05,0.1,0.25,0.5,1.0")]
    pub fractions: String,
    /// Number of seeds, starting at `--seed`.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `name=config.json` or a preset name; repeatable.
    #[arg(long = "method", default_values_t = ["baseline".to_string(), "sr".to_string()])]
    pub methods: Vec<String>,
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub min_steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON files (single reports or arrays).
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value = "json")]
    pub format: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Keep scratch outputs here instead of a temporary directory.
    #[arg(long)]
    pub work: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Labels(a) => labels(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Audit(a) => audit(a),
        Command::Fewshot(a) => fewshot(a),
        Command::Report(a) => report(a),
        Command::Selftest(a) => crate::selftest::run(a.work.as_deref()).map(|_| ()),
    }
}

fn require_dir(p: &Path) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{}: directory not found", p.display())))
    }
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{}: file not found", p.display())))
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| io_err(p, e))
}

fn to_value<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn gen(a: GenArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p)?;
            read_json::<DatasetConfig>(p)?
        }
        None => DatasetConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.scenes {
        cfg.n_scenes = v;
    }
    if let Some(v) = a.objects {
        cfg.scene.n_objects = v;
    }
    if let Some(v) = a.questions_per_scene {
        cfg.questions_per_scene = v;
    }
    if let Some(v) = a.ood_shift {
        cfg.ood_shift = v;
    }
    let ds = generate_dataset(&cfg).map_err(|e| match e {
        sws_core::io::DataError::Scene(s) => CliError::Usage(s.to_string()),
        other => other.into(),
    })?;
    create_dir(&a.out)?;
    write_dataset(&ds, &a.out)?;
    let mut m = RunManifest::new("gen", to_value(&cfg), vec![cfg.seed]);
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    m.output(&a.out);
    m.write(&a.out.join("manifest.json"))?;
    println!(
        "{} scenes, {} questions (train {}, dev {}, test_iid {}, test_ood {}) -> {}",
        ds.scenes.len(),
        ds.qa.len(),
        ds.splits.train.len(),
        ds.splits.dev.len(),
        ds.splits.test_iid.len(),
        ds.splits.test_ood.len(),
        a.out.display()
    );
    Ok(())
}

fn labels(a: LabelsArgs) -> Result<()> {
    require_dir(&a.scenes)?;
    require_dir(&a.depth)?;
    let bins: Vec<usize> = parse_list(&a.bins, "bin count")?;
    for &c in &bins {
        make_bin_spec(a.lambda, c).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if a.dims != 2 && a.dims != 3 {
        return Err(CliError::Usage(format!("--dims must be 2 or 3, got {}", a.dims)));
    }
    let written = pipeline::build_label_files(&a.scenes, &a.depth, &a.out, a.dims, &bins, a.lambda)?;
    let cfg = json!({"dims": a.dims, "bins": bins, "lambda": a.lambda});
    let mut m = RunManifest::new("labels", cfg, Vec::new());
    m.input(&a.scenes)?;
    m.input(&a.depth)?;
    m.output(&a.out);
    m.write(&a.out.join("manifest.json"))?;
    println!("{} label files -> {}", written.len(), a.out.display());
    Ok(())
}

/// Model config from a JSON file or a preset name.
pub fn load_model_config(spec: &str) -> Result<ModelConfig> {
    if let Some(cfg) = pipeline::preset(spec) {
        return Ok(cfg);
    }
    let p = Path::new(spec);
    require_file(p)?;
    Ok(read_json(p)?)
}

fn load_train_config(p: Option<&Path>) -> Result<TrainConfig> {
    match p {
        Some(p) => {
            require_file(p)?;
            Ok(read_json(p)?)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn needs_labels(cfg: &ModelConfig) -> bool {
    cfg.sr_task != SrTask::None || cfg.relpos_input != sws_model::RelposInput::None
}

fn train(a: TrainArgs) -> Result<()> {
    require_dir(&a.data)?;
    let model_cfg = load_model_config(&a.model_config)?;
    let mut tc = load_train_config(a.train_config.as_deref())?;
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.lr {
        tc.lr = v;
    }
    if a.pretrained_lr {
        tc.lr = PRETRAINED_LR;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.fraction {
        tc.fraction = v;
    }
    if let Some(v) = a.min_steps {
        tc.min_steps = v;
    }
    tc.validate()?;
    let ds = read_dataset(&a.data)?;
    let model_cfg = with_vocab(model_cfg, &ds);
    model_cfg.validate()?;
    let label_dir = a.labels.clone().unwrap_or_else(|| a.data.join("labels"));
    let labels = if needs_labels(&model_cfg) {
        load_labels(&label_dir, &ds)?
    } else {
        HashMap::new()
    };
    let method = a.method.clone().unwrap_or_else(|| a.model_config.clone());
    let run = run_experiment(&ds, &labels, &model_cfg, &tc, &method, Some(&a.out))?;
    for r in run.reports(&method) {
        write_json(&r, &a.out.join(format!("report_{}.json", r.split)))?;
    }
    let mut m = RunManifest::new(
        "train",
        json!({"model_config": model_cfg, "train_config": tc, "method": method}),
        vec![tc.seed],
    );
    m.input(&a.data)?;
    if needs_labels(&model_cfg) {
        m.input(&label_dir)?;
    }
    if let Some(p) = &a.train_config {
        m.input(p)?;
    }
    m.output(&a.out);
    m.write(&a.out.join("manifest.json"))?;
    println!(
        "best epoch {} of {}; test_iid vqa {:.4} spatial {:.4}; test_ood spatial {:.4}",
        run.outcome.best_epoch, tc.epochs, run.iid.vqa_acc, run.iid.spatial_acc, run.ood.spatial_acc
    );
    Ok(())
}

fn read_gold_for(preds: &[Prediction], gold_path: &Path) -> Result<Vec<QAItem>> {
    require_file(gold_path)?;
    let gold: Vec<QAItem> = read_jsonl(gold_path)?;
    let by_id: HashMap<&str, &QAItem> = gold.iter().map(|q| (q.question_id.as_str(), q)).collect();
    preds
        .iter()
        .map(|p| {
            by_id
                .get(p.question_id.as_str())
                .map(|q| (*q).clone())
                .ok_or_else(|| CliError::Data(format!("prediction for unknown question {}", p.question_id)))
        })
        .collect()
}

fn read_predictions(p: &Path) -> Result<Vec<Prediction>> {
    require_file(p)?;
    let preds: Vec<Prediction> = read_jsonl(p)?;
    if preds.is_empty() {
        return Err(CliError::Data(format!("{}: no predictions", p.display())));
    }
    Ok(preds)
}

/// SR metrics for the question pairs that carry SR predictions.
fn sr_metrics(
    preds: &[Prediction],
    gold: &[QAItem],
    label_dir: &Path,
    bins: Option<usize>,
    report: &mut EvalReport,
) -> Result<()> {
    let mut cache = HashMap::new();
    let (mut rp, mut rt, mut bp, mut bt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (p, q) in preds.iter().zip(gold) {
        let Some(sr) = &p.sr else { continue };
        if !cache.contains_key(&q.scene_id) {
            cache.insert(q.scene_id.clone(), read_labels(&label_file(label_dir, &q.scene_id))?);
        }
        let l = &cache[&q.scene_id];
        let idx = |id: &str| {
            l.object_ids
                .iter()
                .position(|o| o == id)
                .ok_or_else(|| CliError::Data(format!("object {id} not in labels of {}", q.scene_id)))
        };
        let (i, j) = (idx(&sr.subject_id)?, idx(&sr.object_id)?);
        if let Some(delta) = &sr.delta {
            for (d, v) in delta.iter().enumerate().take(l.dims) {
                rp.push(*v);
                rt.push(l.rpe_at(i, j, d));
            }
        }
        if let (Some(b), Some(c)) = (&sr.bins, bins) {
            for (d, v) in b.iter().enumerate().take(l.dims) {
                bp.push(*v);
                bt.push(
                    l.bin_at(c, i, j, d)
                        .ok_or_else(|| CliError::Data(format!("labels lack C={c}")))?,
                );
            }
        }
    }
    if !rp.is_empty() {
        report.sr_mse = Some(sr_mse(&rp, &rt, &vec![true; rp.len()])?);
    }
    if let (false, Some(c)) = (bp.is_empty(), bins) {
        report
            .bin_accuracy
            .insert(c, bin_accuracy(&bp, &bt, &vec![true; bp.len()])?);
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let preds = read_predictions(&a.pred)?;
    let gold = read_gold_for(&preds, &a.gold)?;
    let answers: Vec<String> = preds.iter().map(|p| p.answer.clone()).collect();
    let acc = |f| vqa_accuracy(&answers, &gold, f).unwrap_or(0.0);
    let spec = a
        .bins
        .map(|c| make_bin_spec(DEFAULT_LAMBDA, c).map_err(|e| CliError::Usage(e.to_string())))
        .transpose()?;
    let audit = consistency_audit(&gold, &preds, spec.as_ref());
    let mut report = EvalReport {
        split: a.split.clone(),
        method: a.method.clone(),
        n_questions: preds.len(),
        vqa_accuracy: vqa_accuracy(&answers, &gold, QuestionFilter::All)?,
        spatial_accuracy: acc(QuestionFilter::Spatial),
        open_accuracy: acc(QuestionFilter::Open),
        binary_accuracy: acc(QuestionFilter::Binary),
        sr_mse: None,
        bin_accuracy: BTreeMap::new(),
        consistency_rate: audit.consistency_rate,
        inconsistency_rate: audit.inconsistency_rate,
        audited: audit.consistent + audit.inconsistent,
    };
    if let Some(dir) = &a.labels {
        require_dir(dir)?;
        sr_metrics(&preds, &gold, dir, a.bins, &mut report)?;
    }
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(&report, &a.report)?;
    let mut m = RunManifest::new(
        "eval",
        json!({"bins": a.bins, "split": a.split, "method": a.method}),
        Vec::new(),
    );
    m.input(&a.pred)?;
    m.input(&a.gold)?;
    if let Some(dir) = &a.labels {
        m.input(dir)?;
    }
    m.output(&a.report);
    m.write(&manifest_beside(&a.report))?;
    println!("{}", emit_reports(&[report], ReportFormat::Csv)?.trim_end());
    Ok(())
}

fn manifest_beside(file: &Path) -> PathBuf {
    let name = file
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    file.with_file_name(format!("{name}.manifest.json"))
}

fn audit(a: AuditArgs) -> Result<()> {
    let preds = read_predictions(&a.pred)?;
    let gold = read_gold_for(&preds, &a.gold)?;
    let spec = a
        .bins
        .map(|c| make_bin_spec(a.lambda, c).map_err(|e| CliError::Usage(e.to_string())))
        .transpose()?;
    let result = consistency_audit(&gold, &preds, spec.as_ref());
    let summary = json!({
        "consistent": result.consistent,
        "inconsistent": result.inconsistent,
        "abstain": result.abstain,
        "gaps": result.gaps,
        "consistency_rate": result.consistency_rate,
        "inconsistency_rate": result.inconsistency_rate,
    });
    println!("{summary}");
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(&result, &a.out)?;
    let mut m = RunManifest::new("audit", json!({"bins": a.bins, "lambda": a.lambda}), Vec::new());
    m.input(&a.pred)?;
    m.input(&a.gold)?;
    m.output(&a.out);
    m.write(&manifest_beside(&a.out))?;
    Ok(())
}

fn parse_method(spec: &str) -> Result<(String, ModelConfig)> {
    match spec.split_once('=') {
        Some((name, path)) => Ok((name.to_string(), load_model_config(path)?)),
        None => pipeline::preset(spec)
            .map(|c| (spec.to_string(), c))
            .ok_or_else(|| CliError::Usage(format!("unknown method preset {spec:?}"))),
    }
}

fn fewshot(a: FewshotArgs) -> Result<()> {
    require_dir(&a.data)?;
    let fractions: Vec<f64> = parse_list(&a.fractions, "fraction")?;
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(CliError::Usage("fractions must lie in (0, 1]".into()));
    }
    let methods: Vec<(String, ModelConfig)> = a.methods.iter().map(|m| parse_method(m)).collect::<Result<_>>()?;
    let mut base_tc = load_train_config(a.train_config.as_deref())?;
    if let Some(v) = a.epochs {
        base_tc.epochs = v;
    }
    match (a.min_steps, &a.train_config) {
        (Some(v), _) => base_tc.min_steps = v,
        (None, None) => base_tc.min_steps = pipeline::FEWSHOT_MIN_STEPS,
        (None, Some(_)) => {}
    }
    let ds = read_dataset(&a.data)?;
    let label_dir = a.labels.clone().unwrap_or_else(|| a.data.join("labels"));
    let any_labels = methods.iter().any(|(_, c)| needs_labels(c));
    let labels = if any_labels {
        load_labels(&label_dir, &ds)?
    } else {
        HashMap::new()
    };
    create_dir(&a.out)?;
    let mut points = Vec::new();
    for &fraction in &fractions {
        for (name, cfg) in &methods {
            for seed in a.seed..a.seed + a.seeds {
                let tc = TrainConfig {
                    seed,
                    fraction,
                    ..base_tc.clone()
                };
                let run = run_experiment(&ds, &labels, cfg, &tc, name, None)?;
                eprintln!(
                    "fraction {fraction} {name} seed {seed}: {} train questions, spatial {:.4}",
                    run.train_size, run.iid.spatial_acc
                );
                points.push(FewShotPoint {
                    fraction,
                    method: name.clone(),
                    spatial_accuracy: run.iid.spatial_acc,
                    seed,
                });
            }
        }
    }
    let csv_path = a.out.join("fewshot.csv");
    fs::write(&csv_path, fewshot_csv(&points)).map_err(|e| io_err(&csv_path, e))?;
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let cfg = json!({
        "fractions": fractions,
        "methods": methods.iter().map(|(n, c)| json!({"name": n, "config": c})).collect::<Vec<_>>(),
        "train_config": base_tc,
    });
    let mut m = RunManifest::new("fewshot", cfg, seeds);
    m.input(&a.data)?;
    if any_labels {
        m.input(&label_dir)?;
    }
    m.output(&csv_path);
    m.write(&a.out.join("manifest.json"))?;
    print!("{}", fewshot_csv(&points));
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let format: ReportFormat = a.format.parse()?;
    let mut reports = Vec::new();
    for p in &a.inputs {
        require_file(p)?;
        let v: serde_json::Value = read_json(p)?;
        let parsed: std::result::Result<Vec<EvalReport>, _> = if v.is_array() {
            serde_json::from_value(v)
        } else {
            serde_json::from_value(v).map(|r| vec![r])
        };
        reports.extend(parsed.map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?);
    }
    let text = emit_reports(&reports, format)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(&a.out, &text).map_err(|e| io_err(&a.out, e))?;
    let mut m = RunManifest::new("report", json!({"format": a.format}), Vec::new());
    for p in &a.inputs {
        m.input(p)?;
    }
    m.output(&a.out);
    m.write(&manifest_beside(&a.out))?;
    Ok(())
}
