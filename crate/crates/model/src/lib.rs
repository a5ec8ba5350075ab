//! Transformer VQA model with auxiliary spatial-reasoning heads.

pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod train;

pub use config::{ModelConfig, RelposInput, SrMode, SrTask, TrainConfig};
pub use error::{ModelError, Result};
pub use model::Model;

pub type Batch32 = data::Batch<f32>;
pub type Batch64 = data::Batch<f64>;
