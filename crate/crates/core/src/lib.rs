//! Synthetic blocks-world scenes, depth-derived spatial supervision, patch
//! pyramids and evaluation metrics.

pub mod evalkit;
pub mod geometry;
pub mod io;
pub mod labels;
pub mod patches;
pub mod scenegen;

pub use geometry::{BBox, BinSpec, Centroid, DepthMap, RelPosVec};

pub type BBox32 = BBox<f32>;
pub type BBox64 = BBox<f64>;
pub type DepthMap32 = DepthMap<f32>;
pub type DepthMap64 = DepthMap<f64>;
