//! On-disk layout of a project directory, shared by the command line and the service.
//!
//! ```text
//! <data_dir>/
//!   frames.json          frame index written by ingest
//!   mslp/<i>.etcg        MSLP grid of frame i
//!   ttr/<i>.etcg         TTR grid of frame i
//!   images/<i>.png       rendered TTR frames
//!   cache/               service image cache
//!   centers.jsonl        detected centers
//!   tracks.jsonl         linked tracks
//!   suggestions.jsonl    suggested boxes per center
//!   labels.jsonl         annotation journal
//!   splits.json          frozen train/test assignment
//!   model.json           trained detector checkpoint
//!   loss.csv             training loss trace
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::fsio::write_atomic_bytes;
use crate::grid::FieldKind;
use crate::labelstore::{split_train_test, Annotation, DatasetError, DatasetManifest, FrameEntry, LabeledBox, ReviewState, Split};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectLayout {
    root: PathBuf,
}

impl ProjectLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn grid_dir(&self, kind: FieldKind) -> PathBuf {
        self.root.join(match kind {
            FieldKind::Ttr => "ttr",
            FieldKind::Mslp => "mslp",
            FieldKind::Vorticity => "vorticity",
        })
    }

    pub fn grid_path(&self, kind: FieldKind, frame: u32) -> PathBuf {
        self.grid_dir(kind).join(format!("{frame}.etcg"))
    }

    pub fn images_dir(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn image_path(&self, frame: u32) -> PathBuf {
        self.images_dir().join(format!("{frame}.png"))
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.root.join("cache")
    }

    pub fn frame_index(&self) -> PathBuf {
        self.root.join("frames.json")
    }

    pub fn centers(&self) -> PathBuf {
        self.root.join("centers.jsonl")
    }

    pub fn tracks(&self) -> PathBuf {
        self.root.join("tracks.jsonl")
    }

    pub fn suggestions(&self) -> PathBuf {
        self.root.join("suggestions.jsonl")
    }

    pub fn journal(&self) -> PathBuf {
        self.root.join("labels.jsonl")
    }

    pub fn splits(&self) -> PathBuf {
        self.root.join("splits.json")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.json")
    }

    pub fn loss_trace(&self) -> PathBuf {
        self.root.join("loss.csv")
    }

    pub fn read_frames(&self) -> io::Result<Vec<FrameInfo>> {
        let path = self.frame_index();
        if !path.exists() {
            return Ok(Vec::new());
        }
        serde_json::from_slice(&fs::read(path)?).map_err(io::Error::other)
    }

    pub fn write_frames(&self, frames: &[FrameInfo]) -> io::Result<()> {
        write_atomic_bytes(self.frame_index(), &serde_json::to_vec_pretty(frames).map_err(io::Error::other)?)
    }

    pub fn read_splits(&self) -> io::Result<Option<SplitAssignment>> {
        let path = self.splits();
        if !path.exists() {
            return Ok(None);
        }
        serde_json::from_slice(&fs::read(path)?).map(Some).map_err(io::Error::other)
    }

    pub fn write_splits(&self, splits: &SplitAssignment) -> io::Result<()> {
        write_atomic_bytes(self.splits(), &serde_json::to_vec_pretty(splits).map_err(io::Error::other)?)
    }
}

/// One ingested frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameInfo {
    pub index: u32,
    /// Unix seconds.
    pub timestamp: i64,
    pub has_ttr: bool,
    pub has_mslp: bool,
    /// Content hash of the TTR grid, keying rendered-image caches.
    #[serde(default)]
    pub ttr_hash: Option<u64>,
}

/// Frame-to-split assignment frozen by the `split` step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratio: f64,
    pub frames: BTreeMap<u32, Split>,
}

impl From<&DatasetManifest> for SplitAssignment {
    fn from(m: &DatasetManifest) -> Self {
        Self { seed: m.seed, ratio: m.ratio, frames: m.entries.iter().map(|e| (e.frame, e.split)).collect() }
    }
}

/// Consensus annotations grouped by frame. Frames listed in `fixed` keep their split; the
/// rest are split among themselves with `ratio` and `seed`. Returns the manifest and the ids of
/// skipped non-Consensus annotations.
pub fn build_manifest(
    annotations: &[Annotation],
    fixed: Option<&SplitAssignment>,
    ratio: f64,
    seed: u64,
) -> Result<(DatasetManifest, Vec<String>), DatasetError> {
    let mut frames: BTreeMap<u32, Vec<LabeledBox>> = BTreeMap::new();
    let mut skipped = Vec::new();
    for a in annotations {
        if a.review == ReviewState::Consensus {
            frames.entry(a.frame_index).or_default().push(LabeledBox { bbox: a.bbox, stage: a.stage });
        } else {
            skipped.push(a.id.clone());
        }
    }
    let (mut entries, mut loose) = (Vec::new(), Vec::new());
    for (frame, boxes) in frames {
        match fixed.and_then(|f| f.frames.get(&frame)) {
            Some(&split) => entries.push(FrameEntry { frame, boxes, split }),
            None => loose.push((frame, boxes)),
        }
    }
    if !loose.is_empty() {
        entries.extend(split_train_test(loose, ratio, seed)?.entries);
    }
    entries.sort_by_key(|e| e.frame);
    let (seed, ratio) = fixed.map_or((seed, ratio), |f| (f.seed, f.ratio));
    Ok((DatasetManifest { entries, seed, ratio }, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::BoundingBox;
    use crate::labelstore::{LabelStore, NewAnnotation, ReviewAction, StageClass};

    fn consensus(store: &LabelStore, frame: u32) {
        let new = NewAnnotation {
            frame_index: frame,
            bbox: BoundingBox::new(0.1, 0.1, 0.3, 0.3).unwrap(),
            stage: StageClass::Mature,
            track_id: None,
        };
        let (a, _) = store.create(new, "ann").unwrap();
        store.transition(&a.id, ReviewAction::Submit, "ann", None).unwrap();
        store.transition(&a.id, ReviewAction::Accept, "rev", None).unwrap();
    }

    #[test]
    fn fixed_frames_keep_their_split() {
        let store = LabelStore::in_memory();
        for f in 0..10 {
            consensus(&store, f);
        }
        let frames = (0..10).map(|f| (f, if f < 3 { Split::Test } else { Split::Train })).collect();
        let fixed = SplitAssignment { seed: 1, ratio: 0.3, frames };
        let (m, skipped) = build_manifest(&store.list(), Some(&fixed), 0.5, 9).unwrap();
        assert!(skipped.is_empty());
        assert_eq!(m.frame_count(Split::Test), 3);
        assert!(m.entries.iter().all(|e| (e.split == Split::Test) == (e.frame < 3)));
    }

    #[test]
    fn drafts_are_skipped() {
        let store = LabelStore::in_memory();
        consensus(&store, 0);
        let new = NewAnnotation { frame_index: 1, bbox: BoundingBox::new(0.1, 0.1, 0.2, 0.2).unwrap(), stage: StageClass::Developing, track_id: None };
        let (draft, _) = store.create(new, "ann").unwrap();
        let (m, skipped) = build_manifest(&store.list(), None, 0.5, 0).unwrap();
        assert_eq!(skipped, vec![draft.id]);
        assert_eq!(m.entries.len(), 1);
    }

    #[test]
    fn layout_paths() {
        let l = ProjectLayout::new("/p");
        assert_eq!(l.grid_path(FieldKind::Mslp, 7), PathBuf::from("/p/mslp/7.etcg"));
        assert_eq!(l.image_path(3), PathBuf::from("/p/images/3.png"));
    }
}
