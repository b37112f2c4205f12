//! A small single-shot multibox detector trained from scratch.
//!
//! [`priors`] tiles default boxes over four feature maps, [`matching`] assigns them to ground
//! truth, [`loss`] scores predictions, [`nn`] is the network with hand-written gradients,
//! [`train`] runs the optimizer and [`infer`] decodes detections.

pub mod codec;
pub mod infer;
pub mod loss;
pub mod matching;
pub mod nn;
pub mod priors;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::BoundingBox;
use crate::labelstore::StageClass;

/// Floating-point width of all network math.
#[cfg(not(feature = "narrow"))]
pub type Real = f64;
#[cfg(feature = "narrow")]
pub type Real = f32;

pub use codec::{decode, encode, VARIANCES};
pub use infer::{infer, nms, InferConfig};
pub use loss::{multibox_loss, multibox_loss_with_grad, smooth_l1, LossBreakdown, LossConfig, PriorPredictions};
pub use matching::{match_priors, MatchAssignment, PriorTarget};
pub use nn::{MiniSsd, ModelConfig};
pub use priors::{generate_priors, PriorBox, PriorConfig};
pub use train::{load_model, save_model, sgd_step, LossRecord, Optimizer, SampleSource, TrainConfig, Trainer};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("box has non-positive size {width} x {height}")]
    DegenerateBox { width: f64, height: f64 },
    #[error("non-finite loss (conf {conf}, loc {loc}); step aborted")]
    NonFiniteLoss { conf: f64, loc: f64 },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub stage: StageClass,
    pub score: f64,
}
