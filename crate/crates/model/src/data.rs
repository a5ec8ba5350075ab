//! Turns scenes, questions and label files into padded model inputs.

use std::collections::{BTreeSet, HashMap};

use sws_core::io::Dataset;
use sws_core::labels::SRLabels;
use sws_core::patches::extract_pyramid;
use sws_core::scenegen::{project_bbox, render_image, Color, QAItem, Scene, Shape};
use sws_nnkit::{Scalar, Tensor};

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Color one-hot, shape one-hot, then the normalized box.
pub const OBJECT_FEATURES: usize = Color::ALL.len() + Shape::ALL.len() + 4;

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// `<pad>`, `<unk>`, then every question word in sorted order.
pub fn question_vocabulary(items: &[QAItem]) -> Vec<String> {
    let words: BTreeSet<String> = items.iter().flat_map(|q| tokenize(&q.text)).collect();
    [PAD.to_string(), UNK.to_string()].into_iter().chain(words).collect()
}

/// Per-scene inputs padded to `max_objects` slots.
#[derive(Clone, Debug)]
pub struct SceneInputs {
    pub scene_id: String,
    pub object_ids: Vec<String>,
    /// `N × OBJECT_FEATURES`.
    pub features: Vec<f32>,
    /// `N × 2` question-vocabulary ids of each object's color and shape
    /// words (`<pad>` for empty slots).
    pub attr_words: Vec<usize>,
    pub mask: Vec<bool>,
    /// `P × row_len` resampled patch pixels (empty without patches).
    pub patches: Vec<f32>,
    pub labels: Option<SRLabels>,
}

impl SceneInputs {
    pub fn build(scene: &Scene, labels: Option<SRLabels>, cfg: &ModelConfig) -> Result<SceneInputs> {
        let n = cfg.max_objects;
        if scene.objects.len() > n {
            return Err(ModelError::Shape(format!(
                "scene {} has {} objects, model holds {n}",
                scene.scene_id,
                scene.objects.len()
            )));
        }
        let mut features = vec![0.0f32; n * OBJECT_FEATURES];
        let mut mask = vec![false; n];
        let mut attr_words = vec![0usize; n * 2];
        let word_id = |w: &str| {
            cfg.question_vocab
                .iter()
                .position(|v| v == w)
                .or_else(|| cfg.question_vocab.iter().position(|v| v == UNK))
                .unwrap_or(0)
        };
        for (k, o) in scene.objects.iter().enumerate() {
            attr_words[2 * k] = word_id(o.color.name());
            attr_words[2 * k + 1] = word_id(o.shape.name());
            let row = &mut features[k * OBJECT_FEATURES..(k + 1) * OBJECT_FEATURES];
            let ci = Color::ALL.iter().position(|&c| c == o.color).expect("known color");
            let si = Shape::ALL.iter().position(|&s| s == o.shape).expect("known shape");
            row[ci] = 1.0;
            row[Color::ALL.len() + si] = 1.0;
            let b = project_bbox(o, &scene.camera).map_err(|e| ModelError::Data(e.to_string()))?;
            row[Color::ALL.len() + Shape::ALL.len()..].copy_from_slice(&b.cast::<f32>().to_array());
            mask[k] = true;
        }
        let patches = if cfg.use_patches {
            extract_pyramid(&render_image(scene), &cfg.pyramid)
                .map_err(|e| ModelError::Data(e.to_string()))?
                .pixels
        } else {
            Vec::new()
        };
        if let Some(l) = &labels {
            let ids: Vec<&str> = scene.objects.iter().map(|o| o.object_id.as_str()).collect();
            if l.scene_id != scene.scene_id || l.object_ids.iter().map(String::as_str).ne(ids.iter().copied()) {
                return Err(ModelError::Data(format!(
                    "labels do not belong to scene {}",
                    scene.scene_id
                )));
            }
            if l.dims != cfg.dims {
                return Err(ModelError::Config(format!(
                    "labels have D={}, model expects {}",
                    l.dims, cfg.dims
                )));
            }
            if let Some(c) = cfg.sr_mode.classes() {
                if cfg.sr_task.uses_rpe() && !l.rpe_bins.contains_key(&c) {
                    return Err(ModelError::Data(format!(
                        "labels for {} lack C={c} bins",
                        scene.scene_id
                    )));
                }
            }
        }
        Ok(SceneInputs {
            scene_id: scene.scene_id.clone(),
            object_ids: scene.objects.iter().map(|o| o.object_id.clone()).collect(),
            features,
            attr_words,
            mask,
            patches,
            labels,
        })
    }

    pub fn num_objects(&self) -> usize {
        self.object_ids.len()
    }
}

/// One question bound to its scene.
#[derive(Clone, Debug)]
pub struct Example {
    pub question_id: String,
    pub scene: usize,
    pub tokens: Vec<usize>,
    pub answer: usize,
    pub is_spatial: bool,
    pub template: String,
    pub subject_slot: Option<usize>,
    pub object_slot: Option<usize>,
    pub item: QAItem,
}

/// Scene inputs plus examples for a subset of questions.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub scenes: Vec<SceneInputs>,
    pub examples: Vec<Example>,
    pub index: HashMap<String, usize>,
}

impl PreparedData {
    pub fn examples_for(&self, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.index
                    .get(id)
                    .copied()
                    .ok_or_else(|| ModelError::Data(format!("unknown question {id}")))
            })
            .collect()
    }
}

fn encode_question(q: &QAItem, cfg: &ModelConfig, words: &HashMap<&str, usize>) -> Result<Vec<usize>> {
    let toks = tokenize(&q.text);
    if toks.len() > cfg.max_question_len {
        return Err(ModelError::Shape(format!(
            "question {} has {} tokens, limit {}",
            q.question_id,
            toks.len(),
            cfg.max_question_len
        )));
    }
    let unk = words[UNK];
    Ok(toks
        .iter()
        .map(|t| words.get(t.as_str()).copied().unwrap_or(unk))
        .collect())
}

/// Binds every question of `ds` to padded scene inputs. `labels` maps scene
/// ids to their label files.
pub fn prepare(ds: &Dataset, labels: &HashMap<String, SRLabels>, cfg: &ModelConfig) -> Result<PreparedData> {
    let needs_labels =
        cfg.sr_task != crate::config::SrTask::None || cfg.relpos_input != crate::config::RelposInput::None;
    let mut scenes = Vec::with_capacity(ds.scenes.len());
    let mut scene_index = HashMap::new();
    for s in &ds.scenes {
        let l = match labels.get(&s.scene_id) {
            Some(l) => Some(l.clone()),
            None if needs_labels => {
                return Err(ModelError::Data(format!("no labels for scene {}", s.scene_id)));
            }
            None => None,
        };
        scene_index.insert(s.scene_id.clone(), scenes.len());
        scenes.push(SceneInputs::build(s, l, cfg)?);
    }
    let words: HashMap<&str, usize> = cfg
        .question_vocab
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_str(), i))
        .collect();
    if !words.contains_key(UNK) {
        return Err(ModelError::Config("question vocabulary lacks <unk>".into()));
    }
    let answers: HashMap<&str, usize> = cfg
        .answer_vocab
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_str(), i))
        .collect();
    let mut examples = Vec::with_capacity(ds.qa.len());
    let mut index = HashMap::new();
    for q in &ds.qa {
        let &scene = scene_index
            .get(&q.scene_id)
            .ok_or_else(|| ModelError::Data(format!("question {} names unknown scene", q.question_id)))?;
        let answer = *answers
            .get(q.answer.as_str())
            .ok_or_else(|| ModelError::Data(format!("answer {:?} not in vocabulary", q.answer)))?;
        let slot = |id: &Option<String>| {
            id.as_ref()
                .and_then(|id| scenes[scene].object_ids.iter().position(|o| o == id))
        };
        index.insert(q.question_id.clone(), examples.len());
        examples.push(Example {
            question_id: q.question_id.clone(),
            scene,
            tokens: encode_question(q, cfg, &words)?,
            answer,
            is_spatial: q.is_spatial,
            template: q.template.clone(),
            subject_slot: slot(&q.subject_id),
            object_slot: slot(&q.object_id),
            item: q.clone(),
        });
    }
    Ok(PreparedData {
        scenes,
        examples,
        index,
    })
}

/// Padded tensors for a batch of examples.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub size: usize,
    /// `B·L` token ids (pad id 0) and validity.
    pub tokens: Vec<usize>,
    pub token_mask: Vec<bool>,
    /// `[B·N, F]`.
    pub objects: Tensor<T>,
    /// `B·N·2` attribute word ids.
    pub object_words: Vec<usize>,
    /// `B·N` referent roles: 0 unmentioned, 1 subject, 2 object.
    pub object_roles: Vec<usize>,
    pub object_mask: Vec<bool>,
    /// `[B·P, row_len]` when patches are on.
    pub patches: Option<Tensor<T>>,
    /// `[B·N, D]` (or `[B·N, N·D]` pairwise) relative-position inputs.
    pub relpos: Option<Tensor<T>>,
    pub answers: Vec<usize>,
    /// `[B·N, D]` centroid targets.
    pub oce: Option<Tensor<T>>,
    /// `[B·N·N, D]` relative-position targets.
    pub rpe: Option<Tensor<T>>,
    /// `B·N·N·D` bin classes for the configured `C`.
    pub rpe_bins: Option<Vec<u16>>,
    /// `B·N·D` object-level bin classes (centroids quantized).
    pub oce_bins: Option<Vec<u16>>,
}

impl<T: Scalar> Batch<T> {
    /// Valid `(b, k)` object cells, repeated per dimension.
    pub fn object_cell_mask(&self, dims: usize) -> Vec<bool> {
        self.object_mask
            .iter()
            .flat_map(|&m| std::iter::repeat(m).take(dims))
            .collect()
    }

    /// Valid off-diagonal `(b, i, j)` pairs, repeated per dimension.
    pub fn pair_cell_mask(&self, n: usize, dims: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.size * n * n * dims);
        for b in 0..self.size {
            for i in 0..n {
                for j in 0..n {
                    let ok = i != j && self.object_mask[b * n + i] && self.object_mask[b * n + j];
                    out.extend(std::iter::repeat(ok).take(dims));
                }
            }
        }
        out
    }
}

pub fn make_batch<T: Scalar>(data: &PreparedData, ids: &[usize], cfg: &ModelConfig) -> Result<Batch<T>> {
    let (n, l, d) = (cfg.max_objects, cfg.max_question_len, cfg.dims);
    let b = ids.len();
    let cast = |v: f32| T::from_f64_lossy(v as f64);
    let mut tokens = vec![0usize; b * l];
    let mut token_mask = vec![false; b * l];
    let mut objects = Vec::with_capacity(b * n * OBJECT_FEATURES);
    let mut object_mask = Vec::with_capacity(b * n);
    let mut object_words = Vec::with_capacity(b * n * 2);
    let mut object_roles = vec![0usize; b * n];
    let mut patches = Vec::new();
    let mut answers = Vec::with_capacity(b);
    for (bi, &e) in ids.iter().enumerate() {
        let ex = &data.examples[e];
        let sc = &data.scenes[ex.scene];
        for (t, &tok) in ex.tokens.iter().enumerate() {
            tokens[bi * l + t] = tok;
            token_mask[bi * l + t] = true;
        }
        objects.extend(sc.features.iter().map(|&v| cast(v)));
        object_mask.extend_from_slice(&sc.mask);
        object_words.extend_from_slice(&sc.attr_words);
        if let Some(k) = ex.subject_slot {
            object_roles[bi * n + k] = 1;
        }
        if let Some(k) = ex.object_slot {
            object_roles[bi * n + k] = 2;
        }
        if cfg.use_patches {
            patches.extend(sc.patches.iter().map(|&v| cast(v)));
        }
        answers.push(ex.answer);
    }
    let patches = if cfg.use_patches {
        let p = cfg.num_patches();
        let row = patches.len() / (b * p).max(1);
        Some(Tensor::from_vec(&[b * p, row], patches)?)
    } else {
        None
    };

    let labels: Vec<Option<&SRLabels>> = ids
        .iter()
        .map(|&e| data.scenes[data.examples[e].scene].labels.as_ref())
        .collect();
    let have_labels = labels.iter().all(|l| l.is_some());

    let relpos = match (cfg.relpos_input, have_labels) {
        (crate::config::RelposInput::None, _) => None,
        (_, false) => return Err(ModelError::Data("relative-position input needs labels".into())),
        (_, true) => {
            let width = if cfg.relpos_pairwise { n * d } else { d };
            let mut v = vec![T::zero(); b * n * width];
            for (bi, l) in labels.iter().enumerate() {
                let l = l.expect("checked");
                let m = l.num_objects();
                for i in 0..m {
                    let row = &mut v[(bi * n + i) * width..(bi * n + i + 1) * width];
                    if cfg.relpos_pairwise {
                        for j in 0..m {
                            for dd in 0..d {
                                row[j * d + dd] = cast(l.rpe_at(i, j, dd));
                            }
                        }
                    } else {
                        for dd in 0..d {
                            row[dd] = cast(l.rpe_at(i, 0, dd));
                        }
                    }
                }
            }
            Some(Tensor::from_vec(&[b * n, width], v)?)
        }
    };

    let (mut oce, mut rpe, mut rpe_bins, mut oce_bins) = (None, None, None, None);
    if cfg.sr_task != crate::config::SrTask::None {
        if !have_labels {
            return Err(ModelError::Data("SR supervision needs labels".into()));
        }
        let mut o = vec![T::zero(); b * n * d];
        let mut r = vec![T::zero(); b * n * n * d];
        let classes = cfg.sr_mode.classes();
        let spec = match classes {
            Some(c) => Some(
                sws_core::geometry::make_bin_spec(cfg.bin_lambda, c).map_err(|e| ModelError::Config(e.to_string()))?,
            ),
            None => None,
        };
        let mut rb = vec![0u16; b * n * n * d];
        let mut ob = vec![0u16; b * n * d];
        for (bi, l) in labels.iter().enumerate() {
            let l = l.expect("checked");
            let m = l.num_objects();
            for i in 0..m {
                for dd in 0..d {
                    let v = l.oce_at(i, dd);
                    o[(bi * n + i) * d + dd] = cast(v);
                    if let Some(spec) = &spec {
                        ob[(bi * n + i) * d + dd] =
                            spec.quantize(v).map_err(|e| ModelError::Data(e.to_string()))? as u16;
                    }
                }
                for j in 0..m {
                    for dd in 0..d {
                        let cell = ((bi * n + i) * n + j) * d + dd;
                        r[cell] = cast(l.rpe_at(i, j, dd));
                        if let Some(c) = classes {
                            rb[cell] = l.bin_at(c, i, j, dd).unwrap_or(0);
                        }
                    }
                }
            }
        }
        oce = Some(Tensor::from_vec(&[b * n, d], o)?);
        rpe = Some(Tensor::from_vec(&[b * n * n, d], r)?);
        if classes.is_some() {
            rpe_bins = Some(rb);
            oce_bins = Some(ob);
        }
    }

    Ok(Batch {
        size: b,
        tokens,
        token_mask,
        objects: Tensor::from_vec(&[b * n, OBJECT_FEATURES], objects)?,
        object_words,
        object_roles,
        object_mask,
        patches,
        relpos,
        answers,
        oce,
        rpe,
        rpe_bins,
        oce_bins,
    })
}
