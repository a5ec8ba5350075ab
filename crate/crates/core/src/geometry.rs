//! Normalization, centroid, relative-position and log-scale binning math.
//!
//! Coordinates follow the image convention: `x` grows to the right across the
//! width, `y` grows downward across the height, depth grows away from the
//! camera. All box coordinates are unit-normalized.

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid dimensions {height}x{width}")]
    InvalidDimensions { height: u32, width: u32 },
    #[error("pixel ({x}, {y}) outside a {h}x{w} grid")]
    PixelOutOfRange { x: u32, y: u32, h: u32, w: u32 },
    #[error("invalid box ({x1}, {y1})-({x2}, {y2})")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("depth normalizer must be positive, got {0}")]
    InvalidNormalizer(f64),
    #[error("depth value {value} exceeds normalizer {normalizer}")]
    NormalizerTooSmall { value: f64, normalizer: f64 },
    #[error("depth map must be normalized before computing 3-D centroids")]
    NotNormalized,
    #[error("box covers no pixels")]
    EmptyBox,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionError(usize, usize),
    #[error("invalid bin spec: {0}")]
    InvalidSpec(String),
    #[error("value {0} outside [-1, 1]")]
    OutOfRange(f64),
    #[error("class {class} not in 0..{classes}")]
    InvalidClass { class: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Unit-normalized axis-aligned box `[(x1, y1), (x2, y2)]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Float> BBox<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        let zero = T::zero();
        let one = T::one();
        let ok = zero <= x1 && x1 < x2 && x2 <= one && zero <= y1 && y1 < y2 && y2 <= one;
        if !ok {
            return Err(GeometryError::InvalidBox {
                x1: x1.to_f64().unwrap_or(f64::NAN),
                y1: y1.to_f64().unwrap_or(f64::NAN),
                x2: x2.to_f64().unwrap_or(f64::NAN),
                y2: y2.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> T {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn cast<U: Float>(&self) -> BBox<U> {
        let c = |v: T| U::from(v).unwrap();
        BBox {
            x1: c(self.x1),
            y1: c(self.y1),
            x2: c(self.x2),
            y2: c(self.y2),
        }
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Object centroid in unit-normalized space, `D = 2` or `3` components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Centroid<T> {
    pub coords: Vec<T>,
}

impl<T: Float> Centroid<T> {
    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

/// Pairwise centroid difference, each component in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelPosVec<T> {
    pub delta: Vec<T>,
}

/// Per-pixel depth grid, row-major with `height` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap<T> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
    pub normalized: bool,
}

impl<T: Float> DepthMap<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(GeometryError::InvalidDimensions {
                height: height as u32,
                width: width as u32,
            });
        }
        Ok(DepthMap {
            height,
            width,
            values,
            normalized: false,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }

    pub fn max_value(&self) -> T {
        self.values.iter().copied().fold(T::neg_infinity(), T::max)
    }
}

/// `(x / h, y / w)`: the first coordinate is divided by the first extent.
pub fn normalize_pixel<T: Float>(x: u32, y: u32, h: u32, w: u32) -> Result<(T, T)> {
    if h == 0 || w == 0 {
        return Err(GeometryError::InvalidDimensions { height: h, width: w });
    }
    if x > h || y > w {
        return Err(GeometryError::PixelOutOfRange { x, y, h, w });
    }
    let f = |v: u32| T::from(v).unwrap();
    Ok((f(x) / f(h), f(y) / f(w)))
}

/// Divides every value by the dataset-wide maximum depth.
pub fn normalize_depth<T: Float>(map: &DepthMap<T>, global_max: T) -> Result<DepthMap<T>> {
    if !(global_max > T::zero()) {
        return Err(GeometryError::InvalidNormalizer(
            global_max.to_f64().unwrap_or(f64::NAN),
        ));
    }
    if let Some(&v) = map.values.iter().find(|&&v| v > global_max) {
        return Err(GeometryError::NormalizerTooSmall {
            value: v.to_f64().unwrap_or(f64::NAN),
            normalizer: global_max.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(DepthMap {
        height: map.height,
        width: map.width,
        values: map.values.iter().map(|&v| v / global_max).collect(),
        normalized: true,
    })
}

pub fn centroid_2d<T: Float>(b: &BBox<T>) -> Centroid<T> {
    let two = T::one() + T::one();
    Centroid {
        coords: vec![(b.x1 + b.x2) / two, (b.y1 + b.y2) / two],
    }
}

/// Inclusive pixel index range `[round(lo * n), round(hi * n)]` clipped to the grid.
fn pixel_span<T: Float>(lo: T, hi: T, n: usize) -> Option<(usize, usize)> {
    let nf = n as f64;
    let a = (lo.to_f64()? * nf).round().max(0.0) as usize;
    let b = ((hi.to_f64()? * nf).round() as usize).min(n - 1);
    (a <= b).then_some((a, b))
}

/// Pixels (row, col) that belong to the box for depth averaging.
pub fn box_pixels<T: Float>(b: &BBox<T>, height: usize, width: usize) -> Option<((usize, usize), (usize, usize))> {
    let cols = pixel_span(b.x1, b.x2, width)?;
    let rows = pixel_span(b.y1, b.y2, height)?;
    Some((rows, cols))
}

/// `(x_c, y_c)` from the box midpoint and `z_c` as the mean normalized depth
/// over the box's pixels.
pub fn centroid_3d<T: Float>(b: &BBox<T>, map: &DepthMap<T>) -> Result<Centroid<T>> {
    if !map.normalized {
        return Err(GeometryError::NotNormalized);
    }
    let ((r0, r1), (c0, c1)) = box_pixels(b, map.height, map.width).ok_or(GeometryError::EmptyBox)?;
    let mut sum = 0.0f64;
    for r in r0..=r1 {
        for c in c0..=c1 {
            sum += map.get(r, c).to_f64().unwrap_or(f64::NAN);
        }
    }
    let count = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
    let mut coords = centroid_2d(b).coords;
    coords.push(T::from(sum / count).unwrap());
    Ok(Centroid { coords })
}

/// Component-wise `a - b`.
pub fn relative_position<T: Float>(a: &Centroid<T>, b: &Centroid<T>) -> Result<RelPosVec<T>> {
    if a.dim() != b.dim() {
        return Err(GeometryError::DimensionError(a.dim(), b.dim()));
    }
    Ok(RelPosVec {
        delta: a.coords.iter().zip(&b.coords).map(|(&p, &q)| p - q).collect(),
    })
}

/// Half-width of the singleton center bin used for `C = 3`.
pub const CENTER_TAU: f64 = 1e-6;

pub const SUPPORTED_BIN_COUNTS: [usize; 4] = [3, 7, 15, 30];

/// Log-scale partition of `[-1, 1]` into `C` classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub lambda: f64,
    #[serde(rename = "C")]
    pub num_classes: usize,
    pub widths: Vec<f64>,
    pub edges: Vec<f64>,
}

/// Unnormalized width of bin `c` out of `classes` for growth factor `lambda`.
pub fn raw_bin_width(lambda: f64, classes: usize, c: usize) -> f64 {
    let offset = (c as f64 - classes as f64 / 2.0).abs();
    let e = classes as f64 - offset;
    lambda.powf(-(e + 1.0)) - lambda.powf(-(e + 2.0))
}

pub fn make_bin_spec(lambda: f64, classes: usize) -> Result<BinSpec> {
    if classes < 3 {
        return Err(GeometryError::InvalidSpec(format!(
            "need at least 3 classes, got {classes}"
        )));
    }
    if !(lambda > 1.0) || !lambda.is_finite() {
        return Err(GeometryError::InvalidSpec(format!(
            "lambda must exceed 1, got {lambda}"
        )));
    }
    if classes == 3 {
        let edges = vec![-1.0, -CENTER_TAU, CENTER_TAU, 1.0];
        let widths = edges.windows(2).map(|w| w[1] - w[0]).collect();
        return Ok(BinSpec {
            lambda,
            num_classes: 3,
            widths,
            edges,
        });
    }
    let raw: Vec<f64> = (0..classes).map(|c| raw_bin_width(lambda, classes, c)).collect();
    let total: f64 = raw.iter().sum();
    let widths: Vec<f64> = raw.iter().map(|w| w * 2.0 / total).collect();
    let mut edges = Vec::with_capacity(classes + 1);
    edges.push(-1.0);
    let mut acc = -1.0;
    for w in &widths[..classes - 1] {
        acc += w;
        edges.push(acc);
    }
    edges.push(1.0);
    if edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(GeometryError::InvalidSpec(format!(
            "lambda {lambda} with {classes} classes yields empty bins"
        )));
    }
    Ok(BinSpec {
        lambda,
        num_classes: classes,
        widths,
        edges,
    })
}

impl BinSpec {
    /// Class of `v`: `edges[c] <= v < edges[c+1]`, last bin closed. For the
    /// three-class spec the center bin `[-tau, tau]` is closed on both ends.
    pub fn quantize<T: Float>(&self, v: T) -> Result<usize> {
        let v = v.to_f64().unwrap_or(f64::NAN);
        if !(-1.0..=1.0).contains(&v) {
            return Err(GeometryError::OutOfRange(v));
        }
        if self.num_classes == 3 && v == self.edges[2] {
            return Ok(1);
        }
        // First edge strictly greater than v, minus one.
        let idx = self.edges.partition_point(|&e| e <= v);
        Ok(idx.saturating_sub(1).min(self.num_classes - 1))
    }

    pub fn dequantize(&self, class: usize) -> Result<f64> {
        if class >= self.num_classes {
            return Err(GeometryError::InvalidClass {
                class,
                classes: self.num_classes,
            });
        }
        Ok((self.edges[class] + self.edges[class + 1]) / 2.0)
    }

    /// The class containing zero; its interval is the abstain band for
    /// sign-based consistency checks.
    pub fn zero_bin(&self) -> usize {
        self.quantize(0.0f64).expect("0 is in range")
    }

    pub fn zero_bin_width(&self) -> f64 {
        self.widths[self.zero_bin()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox<f64> {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn normalize_pixel_cases() {
        assert_eq!(normalize_pixel::<f64>(50, 100, 100, 200).unwrap(), (0.5, 0.5));
        assert_eq!(normalize_pixel::<f64>(0, 0, 37, 41).unwrap(), (0.0, 0.0));
        assert_eq!(normalize_pixel::<f64>(37, 41, 37, 41).unwrap(), (1.0, 1.0));
        assert!(matches!(
            normalize_pixel::<f64>(1, 1, 0, 5),
            Err(GeometryError::InvalidDimensions { .. })
        ));
    }

    #[test]
    fn normalize_depth_cases() {
        let m = DepthMap::new(1, 2, vec![2.5, 10.0]).unwrap();
        let n = normalize_depth(&m, 10.0).unwrap();
        assert_eq!(n.values, vec![0.25, 1.0]);
        assert!(n.normalized);
        let c = DepthMap::new(2, 2, vec![4.0; 4]).unwrap();
        assert_eq!(normalize_depth(&c, 4.0).unwrap().values, vec![1.0; 4]);
        assert!(matches!(
            normalize_depth(&m, 0.0),
            Err(GeometryError::InvalidNormalizer(_))
        ));
        assert!(matches!(
            normalize_depth(&m, 5.0),
            Err(GeometryError::NormalizerTooSmall { .. })
        ));
    }

    #[test]
    fn centroid_2d_midpoints() {
        let c = centroid_2d(&bx(0.2, 0.4, 0.6, 0.8));
        assert!((c.coords[0] - 0.4).abs() < 1e-15 && (c.coords[1] - 0.6).abs() < 1e-15);
        assert_eq!(centroid_2d(&bx(0.0, 0.0, 1.0, 1.0)).coords, vec![0.5, 0.5]);
        assert!(BBox::new(0.3, 0.3, 0.3, 0.5).is_err());
        assert!(BBox::new(-0.1, 0.0, 0.5, 0.5).is_err());
    }

    #[test]
    fn centroid_3d_constant_and_two_value() {
        let mut m = normalize_depth(&DepthMap::new(10, 10, vec![3.0; 100]).unwrap(), 10.0).unwrap();
        let c = centroid_3d(&bx(0.2, 0.2, 0.5, 0.6), &m).unwrap();
        assert!((c.coords[2] - 0.3).abs() < 1e-12);
        // Left half of the box at 0.2, right half at 0.6, equal pixel counts.
        for r in 0..10 {
            for col in 0..10 {
                m.values[r * 10 + col] = if col < 5 { 0.2 } else { 0.6 };
            }
        }
        let c = centroid_3d(&bx(0.2, 0.0, 0.7, 0.9), &m).unwrap(); // cols 2..=7
        assert!((c.coords[2] - 0.4).abs() < 1e-12, "{}", c.coords[2]);
    }

    #[test]
    fn centroid_3d_rejects_raw_maps_and_empty_boxes() {
        let raw = DepthMap::new(4, 4, vec![1.0; 16]).unwrap();
        assert_eq!(
            centroid_3d(&bx(0.0, 0.0, 0.5, 0.5), &raw),
            Err(GeometryError::NotNormalized)
        );
        let n = normalize_depth(&raw, 1.0).unwrap();
        assert_eq!(centroid_3d(&bx(0.9, 0.0, 1.0, 0.5), &n), Err(GeometryError::EmptyBox));
    }

    #[test]
    fn relative_position_cases() {
        let a = Centroid {
            coords: vec![0.1, 0.2, 0.3],
        };
        let b = Centroid {
            coords: vec![0.4, 0.1, 0.3],
        };
        let d = relative_position(&a, &b).unwrap().delta;
        assert!((d[0] + 0.3).abs() < 1e-15 && (d[1] - 0.1).abs() < 1e-15 && d[2] == 0.0);
        let r = relative_position(&b, &a).unwrap().delta;
        assert!(d.iter().zip(&r).all(|(p, q)| p + q == 0.0));
        assert!(relative_position(&a, &a).unwrap().delta.iter().all(|&v| v == 0.0));
        let two = Centroid { coords: vec![0.1, 0.2] };
        assert_eq!(relative_position(&a, &two), Err(GeometryError::DimensionError(3, 2)));
    }

    #[test]
    fn three_class_spec_matches_explicit_intervals() {
        let s = make_bin_spec(1.5, 3).unwrap();
        assert_eq!(s.edges, vec![-1.0, -1e-6, 1e-6, 1.0]);
        assert_eq!(s.quantize(-0.5).unwrap(), 0);
        assert_eq!(s.quantize(0.0).unwrap(), 1);
        assert_eq!(s.quantize(0.7).unwrap(), 2);
        assert_eq!(s.quantize(1e-6).unwrap(), 1);
        assert_eq!(s.quantize(-1e-6).unwrap(), 1);
        assert_eq!(s.quantize(-1.0).unwrap(), 0);
        assert_eq!(s.quantize(1.0).unwrap(), 2);
        assert_eq!(s.dequantize(1).unwrap(), 0.0);
        assert!(matches!(s.quantize(1.5), Err(GeometryError::OutOfRange(_))));
        assert!(matches!(s.dequantize(3), Err(GeometryError::InvalidClass { .. })));
    }

    #[test]
    fn seven_class_raw_widths_match_direct_evaluation() {
        // Direct evaluation of 1/l^(C-|c-C/2|+1) - 1/l^(C-|c-C/2|+2):
        // center c=3: 1/1.5^7.5 - 1/1.5^8.5 = 0.0159292..., extreme c=0:
        // 1/1.5^4.5 - 1/1.5^5.5 = 0.0537611...
        assert!((raw_bin_width(1.5, 7, 3) - 0.015_929_212_4).abs() < 1e-10);
        assert!((raw_bin_width(1.5, 7, 4) - 0.015_929_212_4).abs() < 1e-10);
        assert!((raw_bin_width(1.5, 7, 0) - 0.053_761_091_7).abs() < 1e-10);
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(make_bin_spec(1.5, 2), Err(GeometryError::InvalidSpec(_))));
        assert!(matches!(make_bin_spec(1.0, 7), Err(GeometryError::InvalidSpec(_))));
        assert!(matches!(make_bin_spec(0.5, 7), Err(GeometryError::InvalidSpec(_))));
    }

    #[test]
    fn bin_spec_serializes_with_c_key() {
        let s = make_bin_spec(1.5, 7).unwrap();
        let v = serde_json::to_value(&s).unwrap();
        assert_eq!(v["C"], 7);
        let back: BinSpec = serde_json::from_value(v).unwrap();
        assert_eq!(back, s);
    }
}
