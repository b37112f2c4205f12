use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::store::Annotation;
use super::{LabeledBox, ReviewState, StageClass};
use crate::fsio::{write_atomic, write_atomic_bytes};
use crate::geom::{BoundingBox, BoxError};
use crate::grid::{load_grid, render_image, FieldKind, GridError};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no frames to split")]
    Empty,
    #[error("split ratio {0} must lie strictly between 0 and 1")]
    BadRatio(f64),
    #[error("frame {0} has no image")]
    DanglingFrame(u32),
    #[error("frame {0} appears more than once")]
    DuplicateFrame(u32),
    #[error("record on line {line}: {reason}")]
    BadRecord { line: usize, reason: String },
    #[error("invalid box: {0}")]
    Box(#[from] BoxError),
    #[error("cannot write {path}: {source}")]
    Unwritable { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame: u32,
    pub boxes: Vec<LabeledBox>,
    pub split: Split,
}

impl FrameEntry {
    pub fn image_path(&self) -> String {
        format!("frames/{}.png", self.frame)
    }
}

/// Frames with their consensus boxes, each assigned to exactly one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<FrameEntry>,
    pub seed: u64,
    pub ratio: f64,
}

impl DatasetManifest {
    /// Groups Consensus annotations by frame and splits them. Other annotations are skipped
    /// with a warning; their ids are returned.
    pub fn from_annotations(annotations: &[Annotation], ratio: f64, seed: u64) -> Result<(Self, Vec<String>), DatasetError> {
        let mut frames: BTreeMap<u32, Vec<LabeledBox>> = BTreeMap::new();
        let mut skipped = Vec::new();
        for a in annotations {
            if a.review == ReviewState::Consensus {
                frames.entry(a.frame_index).or_default().push(LabeledBox { bbox: a.bbox, stage: a.stage });
            } else {
                log::warn!("skipping annotation {} on frame {}: review state {:?}", a.id, a.frame_index, a.review);
                skipped.push(a.id.clone());
            }
        }
        Ok((split_train_test(frames.into_iter().collect(), ratio, seed)?, skipped))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &FrameEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn frame_count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

/// Random frame-level split with `round(ratio * n)` test frames, deterministic under `seed`.
pub fn split_train_test(frames: Vec<(u32, Vec<LabeledBox>)>, ratio: f64, seed: u64) -> Result<DatasetManifest, DatasetError> {
    if frames.is_empty() {
        return Err(DatasetError::Empty);
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::BadRatio(ratio));
    }
    let mut frames = frames;
    frames.sort_by_key(|(f, _)| *f);
    if let Some(w) = frames.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(DatasetError::DuplicateFrame(w[0].0));
    }
    let n_test = (ratio * frames.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; frames.len()];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let entries = frames
        .into_iter()
        .zip(is_test)
        .map(|((frame, boxes), t)| FrameEntry { frame, boxes, split: if t { Split::Test } else { Split::Train } })
        .collect();
    Ok(DatasetManifest { entries, seed, ratio })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    /// Indexed by `StageClass::code()`: `[train, test]`.
    pub counts: [[usize; 2]; 3],
}

impl CategoryCounts {
    pub fn get(&self, stage: StageClass, split: Split) -> usize {
        self.counts[stage.code()][split_index(split)]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }
}

fn split_index(split: Split) -> usize {
    match split {
        Split::Train => 0,
        Split::Test => 1,
    }
}

pub fn category_counts(manifest: &DatasetManifest) -> CategoryCounts {
    let mut c = CategoryCounts::default();
    for e in &manifest.entries {
        for b in &e.boxes {
            c.counts[b.stage.code()][split_index(e.split)] += 1;
        }
    }
    c
}

/// Source of rendered frame images.
pub trait FrameImages {
    fn frame_image(&self, frame: u32) -> Result<Option<GrayImage>, DatasetError>;
}

impl FrameImages for HashMap<u32, GrayImage> {
    fn frame_image(&self, frame: u32) -> Result<Option<GrayImage>, DatasetError> {
        Ok(self.get(&frame).cloned())
    }
}

/// Renders TTR grids stored as `<dir>/<frame>.etcg`.
#[derive(Debug, Clone)]
pub struct TtrDirectory {
    pub dir: PathBuf,
}

impl TtrDirectory {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_of(&self, frame: u32) -> PathBuf {
        self.dir.join(format!("{frame}.etcg"))
    }
}

impl FrameImages for TtrDirectory {
    fn frame_image(&self, frame: u32) -> Result<Option<GrayImage>, DatasetError> {
        let path = self.path_of(frame);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(render_image(&load_grid(path, FieldKind::Ttr)?)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
    pub stage: StageClass,
}

/// One line of `annotations.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub frame: u32,
    pub image: String,
    pub boxes: Vec<BoxRecord>,
    pub split: Split,
}

impl From<&FrameEntry> for AnnotationRecord {
    fn from(e: &FrameEntry) -> Self {
        Self {
            frame: e.frame,
            image: e.image_path(),
            boxes: e
                .boxes
                .iter()
                .map(|b| BoxRecord {
                    xmin: b.bbox.xmin(),
                    ymin: b.bbox.ymin(),
                    xmax: b.bbox.xmax(),
                    ymax: b.bbox.ymax(),
                    stage: b.stage,
                })
                .collect(),
            split: e.split,
        }
    }
}

impl TryFrom<AnnotationRecord> for FrameEntry {
    type Error = BoxError;

    fn try_from(r: AnnotationRecord) -> Result<Self, BoxError> {
        let boxes = r
            .boxes
            .into_iter()
            .map(|b| Ok(LabeledBox { bbox: BoundingBox::new(b.xmin, b.ymin, b.xmax, b.ymax)?, stage: b.stage }))
            .collect::<Result<_, BoxError>>()?;
        Ok(FrameEntry { frame: r.frame, boxes, split: r.split })
    }
}

pub fn write_records<W: Write + ?Sized>(w: &mut W, entries: &[FrameEntry]) -> std::io::Result<()> {
    for e in entries {
        serde_json::to_writer(&mut *w, &AnnotationRecord::from(e))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<AnnotationRecord>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| DatasetError::BadRecord { line: i + 1, reason: e.to_string() })?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestMeta {
    seed: u64,
    ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExportSummary {
    pub images: usize,
    pub records: usize,
    pub boxes: usize,
}

/// Writes `annotations.jsonl`, `manifest.json` and `frames/<frame>.png` under `out_dir`.
pub fn export_dataset(
    manifest: &DatasetManifest,
    images: &dyn FrameImages,
    out_dir: &Path,
) -> Result<ExportSummary, DatasetError> {
    let unwritable = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DatasetError::Unwritable { path, source }
    };
    let frames_dir = out_dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(unwritable(&frames_dir))?;
    let mut boxes = 0;
    for e in &manifest.entries {
        let img = images.frame_image(e.frame)?.ok_or(DatasetError::DanglingFrame(e.frame))?;
        let path = out_dir.join(e.image_path());
        let mut png = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)?;
        write_atomic_bytes(&path, &png).map_err(unwritable(&path))?;
        boxes += e.boxes.len();
    }
    let ann_path = out_dir.join(ANNOTATIONS_FILE);
    write_atomic(&ann_path, |w| write_records(w, &manifest.entries)).map_err(unwritable(&ann_path))?;
    let meta_path = out_dir.join(MANIFEST_FILE);
    let meta = serde_json::to_vec_pretty(&ManifestMeta { seed: manifest.seed, ratio: manifest.ratio })?;
    write_atomic_bytes(&meta_path, &meta).map_err(unwritable(&meta_path))?;
    Ok(ExportSummary { images: manifest.entries.len(), records: manifest.entries.len(), boxes })
}

/// Reads a directory written by [`export_dataset`].
pub fn import_dataset(dir: &Path) -> Result<DatasetManifest, DatasetError> {
    let records = read_records(fs::File::open(dir.join(ANNOTATIONS_FILE))?)?;
    let entries = records.into_iter().map(FrameEntry::try_from).collect::<Result<Vec<_>, _>>()?;
    let meta_path = dir.join(MANIFEST_FILE);
    let meta = if meta_path.exists() {
        serde_json::from_slice(&fs::read(meta_path)?)?
    } else {
        ManifestMeta { seed: 0, ratio: 0.2 }
    };
    Ok(DatasetManifest { entries, seed: meta.seed, ratio: meta.ratio })
}
