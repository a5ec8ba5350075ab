//! Model and training configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sws_core::geometry::SUPPORTED_BIN_COUNTS;
use sws_core::patches::PyramidConfig;

use crate::error::{ModelError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SrTask {
    None,
    Oce,
    Rpe,
    OceRpe,
}

impl SrTask {
    pub fn uses_oce(self) -> bool {
        matches!(self, SrTask::Oce | SrTask::OceRpe)
    }

    pub fn uses_rpe(self) -> bool {
        matches!(self, SrTask::Rpe | SrTask::OceRpe)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SrMode {
    Regression,
    Bins(usize),
}

impl SrMode {
    pub fn classes(self) -> Option<usize> {
        match self {
            SrMode::Regression => None,
            SrMode::Bins(c) => Some(c),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelposInput {
    None,
    Early,
    Late,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub lang_layers: usize,
    pub visual_layers: usize,
    pub cross_layers: usize,
    pub fusion_layers: usize,
    /// Object slots per scene; extra slots are masked padding.
    pub max_objects: usize,
    pub max_question_len: usize,
    pub dims: usize,
    pub sr_task: SrTask,
    pub sr_mode: SrMode,
    pub relpos_input: RelposInput,
    /// Feed each object's full row of pairwise offsets instead of its offset
    /// to object 0.
    pub relpos_pairwise: bool,
    pub use_patches: bool,
    pub pyramid: PyramidConfig,
    pub bin_lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub dropout: f64,
    pub question_vocab: Vec<String>,
    pub answer_vocab: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            heads: 4,
            ffn_mult: 4,
            lang_layers: 2,
            visual_layers: 2,
            cross_layers: 2,
            fusion_layers: 2,
            max_objects: 6,
            max_question_len: 14,
            dims: 3,
            sr_task: SrTask::None,
            sr_mode: SrMode::Regression,
            relpos_input: RelposInput::None,
            relpos_pairwise: false,
            use_patches: false,
            pyramid: PyramidConfig::default(),
            bin_lambda: 1.5,
            alpha: 1.0,
            beta: 1.0,
            dropout: 0.0,
            question_vocab: Vec::new(),
            answer_vocab: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if let SrMode::Bins(c) = self.sr_mode {
            if !SUPPORTED_BIN_COUNTS.contains(&c) {
                return bad(format!("bin count {c} not in {SUPPORTED_BIN_COUNTS:?}"));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} = {v} outside (0, 1]"));
            }
        }
        if self.dims != 2 && self.dims != 3 {
            return bad(format!("dims must be 2 or 3, got {}", self.dims));
        }
        if self.max_objects == 0 || self.max_question_len == 0 {
            return bad("max_objects and max_question_len must be positive".into());
        }
        if self.question_vocab.is_empty() || self.answer_vocab.is_empty() {
            return bad("question and answer vocabularies must be set".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.use_patches {
            self.pyramid.validate().map_err(|e| ModelError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        if self.use_patches {
            self.pyramid.num_patches()
        } else {
            0
        }
    }

    /// Fusion sequence length `1 + N + L + P`.
    pub fn fusion_len(&self) -> usize {
        1 + self.max_objects + self.max_question_len + self.num_patches()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Lower bound on optimizer steps; small subsets train for more epochs.
    pub min_steps: usize,
    pub seed: u64,
    pub fraction: f64,
}

/// Learning rate used with pretrained initialization.
pub const PRETRAINED_LR: f64 = 1e-5;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            batch_size: 32,
            epochs: 20,
            min_steps: 0,
            seed: 0,
            fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(ModelError::Config(format!("fraction {} outside (0, 1]", self.fraction)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(ModelError::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(ModelError::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        Ok(())
    }
}
