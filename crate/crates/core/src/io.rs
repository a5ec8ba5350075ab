//! File formats and the on-disk dataset layout.
//!
//! ```text
//! DIR/dataset.json         generation config and answer vocabulary
//! DIR/scenes/<id>.json     one scene per file
//! DIR/depth/<id>.dpth      raw depth in meters
//! DIR/qa.jsonl             one question per line
//! DIR/splits.json          question ids per split
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::DepthMap;
use crate::scenegen::{
    answer_vocabulary, generate_questions, generate_scene, make_splits, render_depth, QAItem, QuestionSpec, Scene,
    SceneError, SceneSpec, Splits,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Scene(#[from] SceneError),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, msg: impl ToString) -> DataError {
    DataError::Format {
        path: path.display().to_string(),
        msg: msg.to_string(),
    }
}

pub const DEPTH_MAGIC: &[u8; 4] = b"DPTH";

pub fn encode_depth(map: &DepthMap<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * map.values.len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    for v in &map.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8]) -> std::result::Result<DepthMap<f32>, String> {
    if bytes.len() < 12 || &bytes[..4] != DEPTH_MAGIC {
        return Err("not a depth file".into());
    }
    let h = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let w = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let body = &bytes[12..];
    if h.checked_mul(w).and_then(|n| n.checked_mul(4)) != Some(body.len()) {
        return Err(format!("expected {h}x{w} floats, found {} bytes", body.len()));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    DepthMap::new(h, w, values).map_err(|e| e.to_string())
}

pub fn write_depth(map: &DepthMap<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_depth(map)).map_err(io_err(path))
}

pub fn read_depth(path: &Path) -> Result<DepthMap<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_depth(&bytes).map_err(|m| format_err(path, m))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| format_err(path, e))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub questions_per_scene: usize,
    pub ood_shift: f64,
    pub scene: SceneSpec,
    pub questions: QuestionSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            n_scenes: 2000,
            questions_per_scene: 5,
            ood_shift: 0.5,
            scene: SceneSpec::default(),
            questions: QuestionSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub config: DatasetConfig,
    pub answer_vocab: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub scenes: Vec<Scene>,
    pub depth: Vec<DepthMap<f32>>,
    pub qa: Vec<QAItem>,
    pub splits: Splits,
}

/// Independent per-item seed: a SplitMix64 step over `(base, index, stream)`.
pub fn derive_seed(base: u64, index: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates scenes, depth and questions. Scene `i` depends only on
/// `(seed, i)`, so the result does not depend on the thread count.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    let per_scene: Vec<(Scene, DepthMap<f32>, Vec<QAItem>)> = (0..cfg.n_scenes)
        .into_par_iter()
        .map(|i| {
            let mut scene = generate_scene(derive_seed(cfg.seed, i as u64, 1), &cfg.scene)?;
            scene.scene_id = format!("scene_{i:05}");
            let depth = render_depth(&scene);
            let qa = generate_questions(
                &scene,
                derive_seed(cfg.seed, i as u64, 2),
                cfg.questions_per_scene,
                &cfg.questions,
            )?;
            Ok((scene, depth, qa))
        })
        .collect::<Result<_>>()?;
    let mut scenes = Vec::with_capacity(per_scene.len());
    let mut depth = Vec::with_capacity(per_scene.len());
    let mut qa = Vec::new();
    for (s, d, q) in per_scene {
        scenes.push(s);
        depth.push(d);
        qa.extend(q);
    }
    let splits = make_splits(&qa, cfg.seed, cfg.ood_shift)?;
    Ok(Dataset {
        header: DatasetHeader {
            config: cfg.clone(),
            answer_vocab: answer_vocabulary(),
        },
        scenes,
        depth,
        qa,
        splits,
    })
}

pub fn scene_path(dir: &Path, scene_id: &str) -> PathBuf {
    dir.join("scenes").join(format!("{scene_id}.json"))
}

pub fn depth_path(dir: &Path, scene_id: &str) -> PathBuf {
    dir.join("depth").join(format!("{scene_id}.dpth"))
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["scenes", "depth"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    write_json(&ds.header, &dir.join("dataset.json"))?;
    ds.scenes
        .par_iter()
        .zip(&ds.depth)
        .try_for_each(|(s, d)| -> Result<()> {
            write_json(s, &scene_path(dir, &s.scene_id))?;
            write_depth(d, &depth_path(dir, &s.scene_id))
        })?;
    write_jsonl(&ds.qa, &dir.join("qa.jsonl"))?;
    write_json(&ds.splits, &dir.join("splits.json"))
}

/// Loads scene ids listed in the scenes directory, sorted by name.
pub fn list_scene_ids(dir: &Path) -> Result<Vec<String>> {
    let scenes = dir.join("scenes");
    let mut ids = Vec::new();
    for entry in fs::read_dir(&scenes).map_err(io_err(&scenes))? {
        let path = entry.map_err(io_err(&scenes))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(DataError::Io {
            path: dir.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        });
    }
    let header: DatasetHeader = read_json(&dir.join("dataset.json"))?;
    let ids = list_scene_ids(dir)?;
    let loaded: Vec<(Scene, DepthMap<f32>)> = ids
        .par_iter()
        .map(|id| Ok((read_json(&scene_path(dir, id))?, read_depth(&depth_path(dir, id))?)))
        .collect::<Result<_>>()?;
    let (scenes, depth) = loaded.into_iter().unzip();
    Ok(Dataset {
        header,
        scenes,
        depth,
        qa: read_jsonl(&dir.join("qa.jsonl"))?,
        splits: read_json(&dir.join("splits.json"))?,
    })
}
