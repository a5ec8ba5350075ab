//! Accuracy metrics, SR metrics, the SR/VQA consistency audit and report output.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BinSpec;
use crate::scenegen::{QAItem, Relation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("nothing to evaluate: {0}")]
    EmptyEval(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("unknown report format {0:?}")]
    ConfigError(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Model output for one question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sr: Option<SrPrediction>,
}

/// Predicted relative position of `subject_id` minus `object_id`, either as
/// raw deltas or as per-dimension bin classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrPrediction {
    pub subject_id: String,
    pub object_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<Vec<u16>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionFilter {
    All,
    Spatial,
    Open,
    Binary,
}

impl QuestionFilter {
    pub fn keeps(self, q: &QAItem) -> bool {
        let binary = q.answer == "yes" || q.answer == "no";
        match self {
            QuestionFilter::All => true,
            QuestionFilter::Spatial => q.is_spatial,
            QuestionFilter::Open => !binary,
            QuestionFilter::Binary => binary,
        }
    }
}

/// Exact-match accuracy over the items kept by `filter`.
pub fn vqa_accuracy(predicted: &[String], gold: &[QAItem], filter: QuestionFilter) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(EvalError::LengthMismatch(predicted.len(), gold.len()));
    }
    let (mut hit, mut n) = (0usize, 0usize);
    for (p, q) in predicted.iter().zip(gold) {
        if filter.keeps(q) {
            n += 1;
            hit += usize::from(*p == q.answer);
        }
    }
    if n == 0 {
        return Err(EvalError::EmptyEval(format!("no {filter:?} questions")));
    }
    Ok(hit as f64 / n as f64)
}

/// Mean squared error over cells where `mask` is set.
pub fn sr_mse(pred: &[f32], target: &[f32], mask: &[bool]) -> Result<f64> {
    if pred.len() != target.len() || mask.len() != target.len() {
        return Err(EvalError::LengthMismatch(pred.len(), target.len()));
    }
    let (mut s, mut n) = (0.0f64, 0usize);
    for ((&p, &t), &m) in pred.iter().zip(target).zip(mask) {
        if m {
            s += (p as f64 - t as f64).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::EmptyEval("mask removes every cell".into()));
    }
    Ok(s / n as f64)
}

/// Fraction of masked cells whose predicted class equals the target class.
pub fn bin_accuracy(pred: &[u16], target: &[u16], mask: &[bool]) -> Result<f64> {
    if pred.len() != target.len() || mask.len() != target.len() {
        return Err(EvalError::LengthMismatch(pred.len(), target.len()));
    }
    let (mut hit, mut n) = (0usize, 0usize);
    for ((&p, &t), &m) in pred.iter().zip(target).zip(mask) {
        if m {
            hit += usize::from(p == t);
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::EmptyEval("mask removes every cell".into()));
    }
    Ok(hit as f64 / n as f64)
}

/// Expected accuracy of a predictor that draws classes independently from
/// `guess` (a distribution over `C` classes) against the masked targets.
pub fn expected_random_accuracy(guess: &[f64], target: &[u16], mask: &[bool]) -> Result<f64> {
    let mut hist = vec![0usize; guess.len()];
    let mut n = 0usize;
    for (&t, &m) in target.iter().zip(mask) {
        if m {
            hist[t as usize] += 1;
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::EmptyEval("mask removes every cell".into()));
    }
    Ok(hist.iter().zip(guess).map(|(&h, &g)| g * h as f64).sum::<f64>() / n as f64)
}

/// Relation word a spatial question asks to confirm. For choice templates
/// this is the gold relation; yes/no templates ask about either the gold
/// relation (gold "yes") or its opposite (gold "no").
pub fn asked_relation(q: &QAItem) -> Option<Relation> {
    let (axis, sign) = q.relation.axis_sign()?;
    match q.answer.as_str() {
        "no" => Some(Relation::from_axis_sign(axis, sign > 0.0)),
        _ => Some(q.relation),
    }
}

/// Relation implied by a predicted answer to a spatial question, if any.
pub fn implied_relation(q: &QAItem, answer: &str) -> Option<Relation> {
    let axis = q.axis()?;
    let rel = match answer {
        "yes" => asked_relation(q)?,
        "no" => {
            let (_, s) = asked_relation(q)?.axis_sign()?;
            Relation::from_axis_sign(axis, s > 0.0)
        }
        w => Relation::from_word(w)?,
    };
    (rel.axis_sign()?.0 == axis).then_some(rel)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Consistent,
    Inconsistent,
    /// The predicted offset lies in the bin containing zero.
    Abstain,
    /// No SR prediction for the question's object pair.
    Gap,
    /// Non-spatial question, or an answer that implies no relation.
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditResult {
    pub consistent: usize,
    pub inconsistent: usize,
    pub abstain: usize,
    pub gaps: usize,
    pub consistency_rate: f64,
    pub inconsistency_rate: f64,
    pub verdicts: Vec<(String, Verdict)>,
}

/// Sign agreement between each spatial answer and the predicted relative
/// position on the question's axis. Regression deltas use their raw sign,
/// bin classes the sign of their midpoint; either abstains inside the bin
/// containing zero. Without a spec, only an exact zero abstains.
pub fn consistency_audit(items: &[QAItem], preds: &[Prediction], spec: Option<&BinSpec>) -> AuditResult {
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|p| (p.question_id.as_str(), p)).collect();
    let mut verdicts = Vec::with_capacity(items.len());
    for q in items {
        let verdict = audit_one(q, by_id.get(q.question_id.as_str()).copied(), spec);
        verdicts.push((q.question_id.clone(), verdict));
    }
    let count = |v: Verdict| verdicts.iter().filter(|(_, x)| *x == v).count();
    let (consistent, inconsistent) = (count(Verdict::Consistent), count(Verdict::Inconsistent));
    let audited = consistent + inconsistent;
    let rate = |k: usize| if audited == 0 { 0.0 } else { k as f64 / audited as f64 };
    AuditResult {
        consistent,
        inconsistent,
        abstain: count(Verdict::Abstain),
        gaps: count(Verdict::Gap),
        consistency_rate: rate(consistent),
        inconsistency_rate: rate(inconsistent),
        verdicts,
    }
}

fn audit_one(q: &QAItem, pred: Option<&Prediction>, spec: Option<&BinSpec>) -> Verdict {
    let Some(axis) = q.axis().filter(|_| q.is_spatial) else {
        return Verdict::Skipped;
    };
    let Some(pred) = pred else {
        return Verdict::Gap;
    };
    let Some(rel) = implied_relation(q, &pred.answer) else {
        return Verdict::Skipped;
    };
    let Some(sr) = pred.sr.as_ref() else {
        return Verdict::Gap;
    };
    // Orient the prediction as subject minus object of the question.
    let flip = match (q.subject_id.as_deref(), q.object_id.as_deref()) {
        (Some(s), Some(o)) if sr.subject_id == s && sr.object_id == o => 1.0,
        (Some(s), Some(o)) if sr.subject_id == o && sr.object_id == s => -1.0,
        _ => return Verdict::Gap,
    };
    let d = axis.index();
    let value = match (&sr.delta, &sr.bins, spec) {
        (_, Some(bins), Some(spec)) => {
            let Some(&c) = bins.get(d) else { return Verdict::Gap };
            if c as usize == spec.zero_bin() {
                return Verdict::Abstain;
            }
            match spec.dequantize(c as usize) {
                Ok(v) => v,
                Err(_) => return Verdict::Gap,
            }
        }
        (Some(delta), _, spec) => {
            let Some(&v) = delta.get(d) else { return Verdict::Gap };
            let v = v as f64;
            let in_zero_bin = match spec {
                Some(spec) => spec.quantize(v.clamp(-1.0, 1.0)).ok() == Some(spec.zero_bin()),
                None => v == 0.0,
            };
            if in_zero_bin {
                return Verdict::Abstain;
            }
            v
        }
        _ => return Verdict::Gap,
    };
    let (_, want) = rel.axis_sign().expect("spatial relation");
    if (flip * value < 0.0) == (want < 0.0) {
        Verdict::Consistent
    } else {
        Verdict::Inconsistent
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub method: String,
    pub n_questions: usize,
    pub vqa_accuracy: f64,
    pub spatial_accuracy: f64,
    pub open_accuracy: f64,
    pub binary_accuracy: f64,
    pub sr_mse: Option<f64>,
    pub bin_accuracy: BTreeMap<usize, f64>,
    pub consistency_rate: f64,
    pub inconsistency_rate: f64,
    pub audited: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(EvalError::ConfigError(other.to_string())),
        }
    }
}

const REPORT_COLUMNS: &str = "split,method,n_questions,vqa_accuracy,spatial_accuracy,open_accuracy,binary_accuracy,sr_mse,bin_accuracy,consistency_rate,inconsistency_rate,audited";

pub fn emit_reports(reports: &[EvalReport], format: ReportFormat) -> Result<String> {
    if reports.is_empty() {
        return Err(EvalError::EmptyEval("no reports".into()));
    }
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(reports).expect("reports serialize");
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Csv => {
            let mut out = String::from(REPORT_COLUMNS);
            out.push('\n');
            for r in reports {
                let bins = r
                    .bin_accuracy
                    .iter()
                    .map(|(c, a)| format!("{c}:{a:.6}"))
                    .collect::<Vec<_>>()
                    .join(";");
                out.push_str(&format!(
                    "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{:.6},{:.6},{}\n",
                    r.split,
                    r.method,
                    r.n_questions,
                    r.vqa_accuracy,
                    r.spatial_accuracy,
                    r.open_accuracy,
                    r.binary_accuracy,
                    r.sr_mse.map(|m| format!("{m:.6}")).unwrap_or_default(),
                    bins,
                    r.consistency_rate,
                    r.inconsistency_rate,
                    r.audited
                ));
            }
            Ok(out)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotPoint {
    pub fraction: f64,
    pub method: String,
    pub spatial_accuracy: f64,
    pub seed: u64,
}

/// Few-shot curve as CSV, ordered by fraction, then method, then seed.
pub fn fewshot_csv(points: &[FewShotPoint]) -> String {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| {
        a.fraction
            .total_cmp(&b.fraction)
            .then_with(|| a.method.cmp(&b.method))
            .then(a.seed.cmp(&b.seed))
    });
    let mut out = String::from("fraction,method,spatial_accuracy,seed\n");
    for p in sorted {
        out.push_str(&format!(
            "{},{},{:.6},{}\n",
            p.fraction, p.method, p.spatial_accuracy, p.seed
        ));
    }
    out
}
