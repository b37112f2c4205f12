//! Stage-classed bounding-box annotations, the two-expert review workflow and dataset export.
//!
//! Every mutation is appended to a JSON-Lines journal; the in-memory index is rebuilt by
//! replaying it. See [`store::LabelStore`].

mod dataset;
mod review;
mod store;

use serde::{Deserialize, Serialize};

use crate::cyclone_track::CycloneCenter;
use crate::geom::{BoundingBox, Rect};
use crate::grid::GridGeometry;

pub use dataset::{
    category_counts, export_dataset, import_dataset, read_records, split_train_test, write_records,
    AnnotationRecord, BoxRecord, CategoryCounts, DatasetError, DatasetManifest, ExportSummary, FrameEntry,
    FrameImages, Split, TtrDirectory,
};
pub use review::{next_state, ActorRole, ReviewAction, ReviewState};
pub use store::{Annotation, EditAnnotation, HistoryEvent, JournalRecord, LabelStore, NewAnnotation};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("illegal transition: {action:?} from {state:?}")]
    IllegalTransition { state: ReviewState, action: ReviewAction },
    #[error("self-review: {actor} annotated this box and cannot {action:?} it")]
    SelfReview { actor: String, action: ReviewAction },
    #[error("resolve requires a non-empty discussion note")]
    MissingNote,
    #[error("annotation {0} not found")]
    NotFound(String),
    #[error("annotation {0} has reached consensus and can no longer be edited")]
    Locked(String),
    #[error("actor identity must be non-empty")]
    EmptyActor,
    #[error("invalid box: {0}")]
    InvalidBox(#[from] crate::geom::BoxError),
    #[error("corrupt journal line {line}: {reason}")]
    CorruptJournal { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageClass {
    Developing,
    Mature,
    Declining,
}

impl StageClass {
    pub const ALL: [StageClass; 3] = [StageClass::Developing, StageClass::Mature, StageClass::Declining];

    pub fn code(self) -> usize {
        match self {
            StageClass::Developing => 0,
            StageClass::Mature => 1,
            StageClass::Declining => 2,
        }
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            StageClass::Developing => "developing",
            StageClass::Mature => "mature",
            StageClass::Declining => "declining",
        }
    }
}

impl std::str::FromStr for StageClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

impl std::fmt::Display for StageClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BoundingBox,
    pub stage: StageClass,
}

/// Half-width of the suggested box, in degrees of latitude and longitude.
pub const DEFAULT_SUGGEST_HALF_EXTENT_DEG: f64 = 15.0;

/// Starting box for an expert: `±half_extent_deg` around the center, clamped to the image.
///
/// Boxes never wrap around the dateline seam; the part beyond an edge is cut off.
pub fn suggest_box(center: &CycloneCenter, geometry: &GridGeometry, half_extent_deg: f64) -> BoundingBox {
    let lat = center.position.lat;
    let lon = center.position.lon;
    let (x0, y_north) = geometry.to_image_xy(lat + half_extent_deg, lon - half_extent_deg);
    let (x1, y_south) = geometry.to_image_xy(lat - half_extent_deg, lon + half_extent_deg);
    let rect = Rect::new(x0.min(x1), y_north.min(y_south), x0.max(x1), y_north.max(y_south));
    BoundingBox::clamped(rect).expect("a positive half extent yields a non-degenerate box")
}
