//! Project configuration: one file holding every stage's settings.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::cyclone_track::TrackerConfig;
use crate::detector::{InferConfig, ModelConfig, TrainConfig};
use crate::eval::Interpolation;
use crate::labelstore::DEFAULT_SUGGEST_HALF_EXTENT_DEG;
use crate::synth::SynthDatasetConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
    /// Detections below this score are not ranked. Lower than the inference default so the
    /// precision-recall curve reaches high recall.
    pub score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.5, interpolation: Interpolation::AllPoint, score_threshold: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub suggest_half_extent_deg: f64,
    /// Fraction of frames sent to the test split.
    pub test_ratio: f64,
    pub split_seed: u64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self { suggest_half_extent_deg: DEFAULT_SUGGEST_HALF_EXTENT_DEG, test_ratio: 0.2, split_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub page_size: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { bind: "127.0.0.1:8080".into(), page_size: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub data_dir: PathBuf,
    pub tracker: TrackerConfig,
    pub labels: LabelConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
    pub synth: SynthDatasetConfig,
    pub service: ServiceConfig,
}

impl ProjectConfig {
    /// Checks every section; the message names the offending section.
    pub fn validate(&self) -> Result<(), String> {
        self.tracker.validate().map_err(|e| format!("tracker: {e}"))?;
        self.augment.validate().map_err(|e| format!("augment: {e}"))?;
        self.model.validate().map_err(|e| format!("model: {e}"))?;
        self.train.validate().map_err(|e| format!("train: {e}"))?;
        if !(0.0..=1.0).contains(&self.eval.iou_threshold) {
            return Err("eval: iou_threshold outside [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.eval.score_threshold) {
            return Err("eval: score_threshold outside [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.infer.score_threshold) || !(0.0..=1.0).contains(&self.infer.nms_iou) {
            return Err("infer: thresholds outside [0, 1]".into());
        }
        if !(self.labels.suggest_half_extent_deg > 0.0 && self.labels.suggest_half_extent_deg.is_finite()) {
            return Err("labels: suggest_half_extent_deg must be positive".into());
        }
        if !(self.labels.test_ratio > 0.0 && self.labels.test_ratio < 1.0) {
            return Err("labels: test_ratio must lie strictly between 0 and 1".into());
        }
        if self.service.page_size == 0 {
            return Err("service: page_size must be positive".into());
        }
        Ok(())
    }

    /// Training settings with the augmentation section and model input size applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.augment = self.augment.clone();
        t.augment.output_size = self.model.input_size;
        t
    }

    pub fn eval_infer_config(&self) -> InferConfig {
        InferConfig { score_threshold: self.eval.score_threshold, ..self.infer }
    }
}
