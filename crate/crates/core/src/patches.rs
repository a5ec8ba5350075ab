//! Multi-scale overlapping patch grids plus the whole image.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatchError {
    #[error("image must be non-empty and match its declared shape")]
    InvalidImage,
    #[error("invalid pyramid config: {0}")]
    InvalidConfig(String),
    #[error("grid {grid} over length {length} produces an empty patch")]
    DegenerateGrid { grid: usize, length: usize },
}

pub type Result<T> = std::result::Result<T, PatchError>;

/// Channel-major image (`channels × height × width`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Image> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(PatchError::InvalidImage);
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Image {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn get(&self, ch: usize, row: usize, col: usize) -> f32 {
        self.data[(ch * self.height + row) * self.width + col]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub scales: Vec<usize>,
    pub overlap: f64,
    pub include_full: bool,
    pub patch_side: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            scales: vec![3, 5, 7],
            overlap: 0.5,
            include_full: true,
            patch_side: 16,
        }
    }
}

impl PyramidConfig {
    pub fn num_patches(&self) -> usize {
        self.scales.iter().map(|g| g * g).sum::<usize>() + usize::from(self.include_full)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.9).contains(&self.overlap) {
            return Err(PatchError::InvalidConfig(format!(
                "overlap {} outside [0, 0.9]",
                self.overlap
            )));
        }
        if self.scales.contains(&0) {
            return Err(PatchError::InvalidConfig("grid sizes must be at least 1".into()));
        }
        if self.patch_side == 0 {
            return Err(PatchError::InvalidConfig("patch_side must be at least 1".into()));
        }
        Ok(())
    }
}

/// Pixel region `[start, start + len)` along rows and columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRegion {
    /// Grid size of the scale, 0 for the whole image.
    pub scale: usize,
    pub row: usize,
    pub col: usize,
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

/// `(start, len)` of each of the `g` patches over an axis of `length` pixels.
///
/// The side is `length / (g - (g - 1) * overlap)` and the stride is
/// `side * (1 - overlap)`; starts and ends are rounded to the nearest pixel and
/// the final patch is pinned to end at `length`.
pub fn axis_spans(length: usize, g: usize, overlap: f64) -> Result<Vec<(usize, usize)>> {
    if g == 0 {
        return Err(PatchError::InvalidConfig("grid size 0".into()));
    }
    let l = length as f64;
    let side = l / (g as f64 - (g as f64 - 1.0) * overlap);
    let stride = side * (1.0 - overlap);
    let mut out = Vec::with_capacity(g);
    for k in 0..g {
        let start = (k as f64 * stride).round() as usize;
        let end = if k + 1 == g {
            length
        } else {
            ((k as f64 * stride + side).round() as usize).min(length)
        };
        if end <= start {
            return Err(PatchError::DegenerateGrid { grid: g, length });
        }
        out.push((start, end - start));
    }
    Ok(out)
}

/// Patch regions in scale-major, row-major order, whole image last.
pub fn pyramid_regions(height: usize, width: usize, cfg: &PyramidConfig) -> Result<Vec<PatchRegion>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.num_patches());
    for &g in &cfg.scales {
        let rows = axis_spans(height, g, cfg.overlap)?;
        let cols = axis_spans(width, g, cfg.overlap)?;
        for (ri, &(y0, h)) in rows.iter().enumerate() {
            for (ci, &(x0, w)) in cols.iter().enumerate() {
                out.push(PatchRegion {
                    scale: g,
                    row: ri,
                    col: ci,
                    y0,
                    x0,
                    h,
                    w,
                });
            }
        }
    }
    if cfg.include_full {
        out.push(PatchRegion {
            scale: 0,
            row: 0,
            col: 0,
            y0: 0,
            x0: 0,
            h: height,
            w: width,
        });
    }
    Ok(out)
}

/// Bilinear resample of one region to `side × side`, sampling at pixel
/// centers. Output is channel-major.
pub fn resample(image: &Image, region: &PatchRegion, side: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(image.channels * side * side);
    let coord = |i: usize, len: usize, start: usize| {
        let s = start as f64 + (i as f64 + 0.5) * len as f64 / side as f64 - 0.5;
        let s = s.clamp(start as f64, (start + len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(start + len - 1);
        (lo, hi, (s - lo as f64) as f32)
    };
    let ys: Vec<_> = (0..side).map(|i| coord(i, region.h, region.y0)).collect();
    let xs: Vec<_> = (0..side).map(|i| coord(i, region.w, region.x0)).collect();
    for ch in 0..image.channels {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = image.get(ch, y0, x0) * (1.0 - fx) + image.get(ch, y0, x1) * fx;
                let bot = image.get(ch, y1, x0) * (1.0 - fx) + image.get(ch, y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPyramid {
    pub regions: Vec<PatchRegion>,
    /// `P × (channels · side²)` row-major, one resampled patch per row.
    pub pixels: Vec<f32>,
    pub row_len: usize,
}

impl PatchPyramid {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn row(&self, p: usize) -> &[f32] {
        &self.pixels[p * self.row_len..(p + 1) * self.row_len]
    }
}

pub fn extract_pyramid(image: &Image, cfg: &PyramidConfig) -> Result<PatchPyramid> {
    if image.data.len() != image.channels * image.height * image.width || image.data.is_empty() {
        return Err(PatchError::InvalidImage);
    }
    let regions = pyramid_regions(image.height, image.width, cfg)?;
    let row_len = image.channels * cfg.patch_side * cfg.patch_side;
    let mut pixels = Vec::with_capacity(regions.len() * row_len);
    for r in &regions {
        pixels.extend(resample(image, r, cfg.patch_side));
    }
    Ok(PatchPyramid {
        regions,
        pixels,
        row_len,
    })
}
