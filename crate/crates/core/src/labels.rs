//! OCE/RPE supervision targets built from boxes and a normalized depth map,
//! and their binary label-file container.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{centroid_2d, centroid_3d, make_bin_spec, BBox, BinSpec, DepthMap, GeometryError};
use crate::io::{read_depth, DataError, Dataset};
use crate::scenegen::{project_bbox, Scene, SceneError};

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("no objects to label")]
    NoObjects,
    #[error("object {index}: box covers no pixels")]
    EmptyBox { index: usize },
    #[error("dimension must be 2 or 3, got {0}")]
    InvalidDims(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("corrupt label file: {0}")]
    CorruptLabels(String),
    #[error("unsupported label file version {0}")]
    UnsupportedVersion(u16),
    #[error("no depth maps given")]
    NoData,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, LabelError>;

pub const LABEL_MAGIC: &[u8; 4] = b"SRLB";
pub const LABEL_VERSION: u16 = 1;
pub const DEFAULT_LAMBDA: f64 = 1.5;
pub const DEFAULT_MAX_OBJECTS: usize = 36;

/// Per-scene supervision. Tensors are row-major: `oce[i*D + d]`,
/// `rpe[(i*N + j)*D + d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SRLabels {
    pub scene_id: String,
    pub object_ids: Vec<String>,
    pub dims: usize,
    pub oce: Vec<f32>,
    pub rpe: Vec<f32>,
    pub rpe_bins: BTreeMap<usize, Vec<u16>>,
    pub bin_specs: BTreeMap<usize, BinSpec>,
}

impl SRLabels {
    pub fn num_objects(&self) -> usize {
        self.object_ids.len()
    }

    pub fn oce_at(&self, i: usize, d: usize) -> f32 {
        self.oce[i * self.dims + d]
    }

    pub fn rpe_at(&self, i: usize, j: usize, d: usize) -> f32 {
        self.rpe[(i * self.num_objects() + j) * self.dims + d]
    }

    pub fn bin_at(&self, classes: usize, i: usize, j: usize, d: usize) -> Option<u16> {
        let n = self.num_objects();
        self.rpe_bins.get(&classes).map(|b| b[(i * n + j) * self.dims + d])
    }

    /// Checks every structural invariant; returns the first violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let (n, dims) = (self.num_objects(), self.dims);
        if n == 0 {
            return Err("no objects".into());
        }
        if dims != 2 && dims != 3 {
            return Err(format!("dims {dims}"));
        }
        if self.oce.len() != n * dims || self.rpe.len() != n * n * dims {
            return Err("tensor length mismatch".into());
        }
        if let Some(v) = self.oce.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(format!("oce value {v} outside [0, 1]"));
        }
        for i in 0..n {
            for j in 0..n {
                for d in 0..dims {
                    let v = self.rpe_at(i, j, d);
                    if v != self.oce_at(i, d) - self.oce_at(j, d) {
                        return Err(format!("rpe[{i}][{j}][{d}] disagrees with oce"));
                    }
                    if v != -self.rpe_at(j, i, d) {
                        return Err(format!("rpe[{i}][{j}][{d}] is not antisymmetric"));
                    }
                }
            }
        }
        if self.rpe_bins.keys().ne(self.bin_specs.keys()) {
            return Err("bin tensors and bin specs disagree".into());
        }
        for (&c, spec) in &self.bin_specs {
            let expect = make_bin_spec(spec.lambda, c).map_err(|e| e.to_string())?;
            if &expect != spec {
                return Err(format!("bin spec for C={c} does not match its lambda"));
            }
            let bins = &self.rpe_bins[&c];
            if bins.len() != n * n * dims {
                return Err(format!("bin tensor for C={c} has wrong length"));
            }
            for (k, (&b, &v)) in bins.iter().zip(&self.rpe).enumerate() {
                let q = spec.quantize(v).map_err(|e| e.to_string())?;
                if q != b as usize {
                    return Err(format!("bin cell {k} for C={c} is {b}, expected {q}"));
                }
            }
        }
        Ok(())
    }
}

/// OCE, RPE and RPE bins for `boxes` over a normalized depth map.
pub fn build_labels(
    scene_id: &str,
    object_ids: &[String],
    boxes: &[BBox<f64>],
    map: &DepthMap<f32>,
    dims: usize,
    bins: &[usize],
    lambda: f64,
) -> Result<SRLabels> {
    if boxes.is_empty() {
        return Err(LabelError::NoObjects);
    }
    if dims != 2 && dims != 3 {
        return Err(LabelError::InvalidDims(dims));
    }
    if object_ids.len() != boxes.len() {
        return Err(LabelError::CorruptLabels("one id per box required".into()));
    }
    let map64 = DepthMap {
        height: map.height,
        width: map.width,
        values: map.values.iter().map(|&v| v as f64).collect(),
        normalized: map.normalized,
    };
    let mut oce = Vec::with_capacity(boxes.len() * dims);
    for (index, b) in boxes.iter().enumerate() {
        let c = if dims == 3 {
            centroid_3d(b, &map64).map_err(|e| match e {
                GeometryError::EmptyBox => LabelError::EmptyBox { index },
                e => e.into(),
            })?
        } else {
            centroid_2d(b)
        };
        oce.extend(c.coords.iter().map(|&v| v as f32));
    }
    from_oce(scene_id, object_ids, oce, dims, bins, lambda)
}

/// Completes labels from per-object targets: RPE is the exact `f32`
/// difference of OCE rows, so antisymmetry holds bit-for-bit.
pub fn from_oce(
    scene_id: &str,
    object_ids: &[String],
    oce: Vec<f32>,
    dims: usize,
    bins: &[usize],
    lambda: f64,
) -> Result<SRLabels> {
    let n = object_ids.len();
    let mut rpe = Vec::with_capacity(n * n * dims);
    for i in 0..n {
        for j in 0..n {
            for d in 0..dims {
                rpe.push(oce[i * dims + d] - oce[j * dims + d]);
            }
        }
    }
    let mut rpe_bins = BTreeMap::new();
    let mut bin_specs = BTreeMap::new();
    for &c in bins {
        let spec = make_bin_spec(lambda, c)?;
        let q = rpe
            .iter()
            .map(|&v| spec.quantize(v).map(|k| k as u16))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        rpe_bins.insert(c, q);
        bin_specs.insert(c, spec);
    }
    Ok(SRLabels {
        scene_id: scene_id.to_string(),
        object_ids: object_ids.to_vec(),
        dims,
        oce,
        rpe,
        rpe_bins,
        bin_specs,
    })
}

/// Labels for a generated scene from its raw depth map and the dataset-wide
/// depth maximum.
pub fn scene_labels(
    scene: &Scene,
    raw_depth: &DepthMap<f32>,
    global_max: f32,
    dims: usize,
    bins: &[usize],
    lambda: f64,
) -> Result<SRLabels> {
    let map = crate::geometry::normalize_depth(raw_depth, global_max)?;
    let boxes = scene
        .objects
        .iter()
        .map(|o| project_bbox(o, &scene.camera))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let ids: Vec<String> = scene.objects.iter().map(|o| o.object_id.clone()).collect();
    build_labels(&scene.scene_id, &ids, &boxes, &map, dims, bins, lambda)
}

/// Labels for every scene of a dataset, normalized by the dataset-wide
/// depth maximum. The maximum is reduced before any scene is normalized.
pub fn dataset_labels(ds: &Dataset, dims: usize, bins: &[usize], lambda: f64) -> Result<Vec<SRLabels>> {
    let global_max = depth_max(&ds.depth)?;
    ds.scenes
        .par_iter()
        .zip(&ds.depth)
        .map(|(s, d)| scene_labels(s, d, global_max, dims, bins, lambda))
        .collect()
}

/// Ground-truth labels: projected box centers for x/y and the normalized
/// 3-D center depth for z.
pub fn oracle_labels(scene: &Scene, global_max: f32, dims: usize, bins: &[usize], lambda: f64) -> Result<SRLabels> {
    let mut oce = Vec::with_capacity(scene.objects.len() * dims);
    for o in &scene.objects {
        let c = centroid_2d(&project_bbox(o, &scene.camera)?);
        oce.extend(c.coords.iter().map(|&v| v as f32));
        if dims == 3 {
            oce.push((o.center_m[2] / global_max as f64) as f32);
        }
    }
    let ids: Vec<String> = scene.objects.iter().map(|o| o.object_id.clone()).collect();
    from_oce(&scene.scene_id, &ids, oce, dims, bins, lambda)
}

#[derive(Serialize, Deserialize)]
struct LabelHeader {
    scene_id: String,
    object_ids: Vec<String>,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "D")]
    dims: usize,
    bin_specs: Vec<BinSpec>,
}

pub fn encode_labels(labels: &SRLabels) -> Vec<u8> {
    let header = LabelHeader {
        scene_id: labels.scene_id.clone(),
        object_ids: labels.object_ids.clone(),
        n: labels.num_objects(),
        dims: labels.dims,
        bin_specs: labels.bin_specs.values().cloned().collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(json.len() + 10 + 4 * (labels.oce.len() + labels.rpe.len()));
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&LABEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in labels.oce.iter().chain(&labels.rpe) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for bins in labels.rpe_bins.values() {
        for b in bins {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| LabelError::CorruptLabels("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn u16s(&mut self, n: usize) -> Result<Vec<u16>> {
        Ok(self
            .take(n * 2)?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect())
    }
}

pub fn decode_labels(bytes: &[u8]) -> Result<SRLabels> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != LABEL_MAGIC {
        return Err(LabelError::CorruptLabels("bad magic".into()));
    }
    let v = r.take(2)?;
    let version = u16::from_le_bytes([v[0], v[1]]);
    if version != LABEL_VERSION {
        return Err(LabelError::UnsupportedVersion(version));
    }
    let l = r.take(4)?;
    let len = u32::from_le_bytes([l[0], l[1], l[2], l[3]]) as usize;
    let header: LabelHeader =
        serde_json::from_slice(r.take(len)?).map_err(|e| LabelError::CorruptLabels(format!("header: {e}")))?;
    let (n, dims) = (header.n, header.dims);
    if header.object_ids.len() != n {
        return Err(LabelError::CorruptLabels("object id count differs from N".into()));
    }
    let cells = n
        .checked_mul(n)
        .and_then(|v| v.checked_mul(dims))
        .filter(|&v| v <= bytes.len())
        .ok_or_else(|| LabelError::CorruptLabels("implausible shape".into()))?;
    let oce = r.f32s(n * dims)?;
    let rpe = r.f32s(cells)?;
    let mut rpe_bins = BTreeMap::new();
    let mut bin_specs = BTreeMap::new();
    for spec in header.bin_specs {
        rpe_bins.insert(spec.num_classes, r.u16s(cells)?);
        bin_specs.insert(spec.num_classes, spec);
    }
    if r.pos != bytes.len() {
        return Err(LabelError::CorruptLabels("trailing bytes".into()));
    }
    let labels = SRLabels {
        scene_id: header.scene_id,
        object_ids: header.object_ids,
        dims,
        oce,
        rpe,
        rpe_bins,
        bin_specs,
    };
    labels.validate().map_err(LabelError::CorruptLabels)?;
    Ok(labels)
}

pub fn write_labels(labels: &SRLabels, path: &Path) -> Result<()> {
    std::fs::write(path, encode_labels(labels)).map_err(|source| LabelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_labels(path: &Path) -> Result<SRLabels> {
    let bytes = std::fs::read(path).map_err(|source| LabelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_labels(&bytes)
}

/// Largest raw depth over a set of maps.
pub fn depth_max<'a>(maps: impl IntoIterator<Item = &'a DepthMap<f32>>) -> Result<f32> {
    maps.into_iter()
        .map(|m| m.max_value())
        .reduce(f32::max)
        .ok_or(LabelError::NoData)
}

/// Dataset-wide depth normalizer over depth files.
pub fn dataset_depth_max<P: AsRef<Path>>(paths: &[P]) -> Result<f32> {
    if paths.is_empty() {
        return Err(LabelError::NoData);
    }
    let mut best = f32::NEG_INFINITY;
    for p in paths {
        best = best.max(read_depth(p.as_ref())?.max_value());
    }
    Ok(best)
}
