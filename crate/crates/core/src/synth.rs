//! Deterministic stand-in data: MSLP series with planted moving lows, and stage-styled
//! cyclone images with their boxes.

use std::collections::HashMap;

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{BoundingBox, Rect};
use crate::grid::{angular_separation_deg, haversine_km, FieldKind, FrameSeries, GeoGrid, GridError, GridGeometry, LatLon, STEP_SECONDS};
use crate::labelstore::{split_train_test, DatasetError, DatasetManifest, FrameEntry, LabeledBox, Split, StageClass};
use crate::raster::Raster;

pub const DEFAULT_AMBIENT_PA: f64 = 101_325.0;
pub const DEFAULT_LOW_RADIUS_DEG: f64 = 4.0;
pub const IMAGE_SIZE: usize = 300;
pub const MAX_PAIR_IOU: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("shape at ({x:.3}, {y:.3}) with size {size} lies entirely outside the canvas")]
    OffCanvas { x: f64, y: f64, size: f64 },
    #[error("could not place a cyclone with IoU below {MAX_PAIR_IOU} after {0} attempts")]
    Crowded(usize),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// A Gaussian pressure low that is present in the frames where `path` is `Some`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedLow {
    pub path: Vec<Option<LatLon>>,
    /// Pa below ambient at the center.
    pub depth: f64,
    /// Gaussian sigma in degrees of arc.
    pub radius: f64,
}

impl PlantedLow {
    pub fn position(&self, frame: usize) -> Option<LatLon> {
        self.path.get(frame).copied().flatten()
    }
}

/// `ambient - sum(depth * exp(-d^2 / 2 sigma^2))` per frame, `d` the angular distance to each
/// active low, plus uniform noise of amplitude `noise`. Also returns a warning for every pair
/// of simultaneous lows closer than two sigmas.
pub fn gen_mslp_series(
    ambient: f64,
    lows: &[PlantedLow],
    frames: usize,
    geometry: GridGeometry,
    noise: f64,
    seed: u64,
) -> Result<(FrameSeries, Vec<String>), SynthError> {
    geometry.validate()?;
    for (i, l) in lows.iter().enumerate() {
        if !(l.depth.is_finite() && l.depth > 0.0 && l.radius.is_finite() && l.radius > 0.0) {
            return Err(SynthError::InvalidSpec(format!("low {i} needs positive depth and radius")));
        }
    }
    if !(ambient.is_finite() && noise.is_finite() && noise >= 0.0) {
        return Err(SynthError::InvalidSpec("ambient and noise must be finite, noise non-negative".into()));
    }
    let mut warnings = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grids = Vec::with_capacity(frames);
    let cells: Vec<LatLon> =
        (0..geometry.n_lat).flat_map(|i| (0..geometry.n_lon).map(move |j| (i, j))).map(|(i, j)| geometry.position(i, j)).collect();
    for f in 0..frames {
        let active: Vec<(LatLon, &PlantedLow)> = lows.iter().filter_map(|l| l.position(f).map(|p| (p, l))).collect();
        for a in 0..active.len() {
            for b in a + 1..active.len() {
                let d = angular_separation_deg(active[a].0, active[b].0);
                if d < 2.0 * active[a].1.radius.max(active[b].1.radius) {
                    let w = format!("frame {f}: lows {d:.1} deg apart, closer than two sigmas; minima may merge");
                    log::warn!("{w}");
                    warnings.push(w);
                }
            }
        }
        let values: Vec<f64> = cells
            .iter()
            .map(|&c| {
                let dip: f64 = active
                    .iter()
                    .map(|(p, l)| {
                        let d = angular_separation_deg(c, *p);
                        l.depth * (-d * d / (2.0 * l.radius * l.radius)).exp()
                    })
                    .sum();
                let n = if noise > 0.0 { rng.gen_range(-noise..=noise) } else { 0.0 };
                ambient - dip + n
            })
            .collect();
        grids.push(GeoGrid::new(geometry, f as i64 * STEP_SECONDS, FieldKind::Mslp, values)?);
    }
    Ok((FrameSeries::new(grids)?, warnings))
}

/// Lows that each start at a random frame, live `min_frames..=max_frames` frames and drift
/// one cell per frame (east, north-east or south-east) on cell centers in 30..65N, never
/// moving more than `max_step_km` in one step. Lows are kept at least `min_sep_deg` apart
/// whenever they coexist.
pub fn random_lows<R: Rng>(
    count: usize,
    frames: usize,
    geometry: &GridGeometry,
    (min_frames, max_frames): (usize, usize),
    min_sep_deg: f64,
    max_step_km: f64,
    rng: &mut R,
) -> Result<Vec<PlantedLow>, SynthError> {
    if min_frames == 0 || min_frames > max_frames || max_frames > frames {
        return Err(SynthError::InvalidSpec("need 0 < min_frames <= max_frames <= frames".into()));
    }
    let rows: Vec<usize> = (0..geometry.n_lat).filter(|&i| (30.0..=65.0).contains(&geometry.lat_of(i))).collect();
    if rows.is_empty() {
        return Err(SynthError::InvalidSpec("grid has no rows in 30..65N".into()));
    }
    let mut lows: Vec<PlantedLow> = Vec::new();
    let budget = 200 * count.max(1);
    let mut attempts = 0;
    while lows.len() < count {
        attempts += 1;
        if attempts > budget {
            return Err(SynthError::Crowded(budget));
        }
        let len = rng.gen_range(min_frames..=max_frames);
        let start = rng.gen_range(0..=frames - len);
        let mut i_lat = rows[rng.gen_range(0..rows.len())];
        let mut i_lon = rng.gen_range(0..geometry.n_lon) as isize;
        let mut path = vec![None; frames];
        let mut ok = true;
        for f in start..start + len {
            let p = geometry.position(i_lat, geometry.wrap_lon(i_lon));
            if lows.iter().any(|l| l.position(f).is_some_and(|q| angular_separation_deg(p, q) < min_sep_deg)) {
                ok = false;
                break;
            }
            path[f] = Some(p);
            i_lon += 1;
            let moves: Vec<usize> = [i_lat.wrapping_sub(1), i_lat, i_lat + 1]
                .into_iter()
                .filter(|r| rows.contains(r))
                .filter(|&r| haversine_km(p, geometry.position(r, geometry.wrap_lon(i_lon))) <= max_step_km)
                .collect();
            if moves.is_empty() {
                ok = false;
                break;
            }
            i_lat = moves[rng.gen_range(0..moves.len())];
        }
        if ok {
            lows.push(PlantedLow { path, depth: rng.gen_range(1500.0..3000.0), radius: DEFAULT_LOW_RADIUS_DEG });
        }
    }
    Ok(lows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthImageSpec {
    pub stage: StageClass,
    /// Normalized position of the cyclone center (the spiral center for the comma shapes).
    pub center: (f64, f64),
    /// Normalized length unit of the shape; the box is roughly 1.2 to 2 units tall.
    pub size: f64,
    /// Amplitude of uniform background noise.
    pub noise: f64,
    pub seed: u64,
}

impl SynthImageSpec {
    fn validate(&self) -> Result<(), SynthError> {
        if !(self.size > 0.0 && self.size <= 1.0) {
            return Err(SynthError::InvalidSpec(format!("size {} outside (0, 1]", self.size)));
        }
        if !(self.noise >= 0.0 && self.noise <= 0.5) {
            return Err(SynthError::InvalidSpec(format!("noise {} outside [0, 0.5]", self.noise)));
        }
        if !(self.center.0.is_finite() && self.center.1.is_finite()) {
            return Err(SynthError::InvalidSpec("non-finite center".into()));
        }
        Ok(())
    }
}

/// A rotated, scaled local frame: unit coordinates to pixels.
#[derive(Debug, Clone, Copy)]
struct Pose {
    cx: f64,
    cy: f64,
    unit: f64,
    cos: f64,
    sin: f64,
    sx: f64,
    sy: f64,
}

impl Pose {
    fn to_px(&self, u: f64, v: f64) -> (f64, f64) {
        let (u, v) = (u * self.sx, v * self.sy);
        (self.cx + self.unit * (u * self.cos - v * self.sin), self.cy + self.unit * (u * self.sin + v * self.cos))
    }
}

/// One stroke sample in unit coordinates: position, radius, intensity.
type Dot = (f64, f64, f64, f64);

fn splat(layer: &mut Raster, x: f64, y: f64, radius: f64, value: f64) {
    let reach = (3.0 * radius).ceil();
    let (w, h) = (layer.width() as f64, layer.height() as f64);
    let x0 = (x - reach).floor().max(0.0) as usize;
    let x1 = (x + reach).ceil().min(w - 1.0);
    let y0 = (y - reach).floor().max(0.0) as usize;
    let y1 = (y + reach).ceil().min(h - 1.0);
    if x1 < 0.0 || y1 < 0.0 || x0 as f64 > x1 || y0 as f64 > y1 {
        return;
    }
    let inv = 1.0 / (2.0 * radius * radius);
    for py in y0..=y1 as usize {
        for px in x0..=x1 as usize {
            let (dx, dy) = (px as f64 + 0.5 - x, py as f64 + 0.5 - y);
            let v = value * (-(dx * dx + dy * dy) * inv).exp();
            if v > layer.get(px, py) {
                layer.set(px, py, v);
            }
        }
    }
}

/// Samples a curve densely enough that neighboring dots overlap.
fn curve(n: usize, f: impl Fn(f64) -> Dot) -> Vec<Dot> {
    (0..n).map(|i| f(i as f64 / (n - 1).max(1) as f64)).collect()
}

/// Log spiral with a trailing band; `fade` is how much the band thins and dims by its tip.
fn spiral_with_tail(tightness: f64, tail_len: f64, width: f64, value: f64, fade: f64) -> Vec<Dot> {
    let turns = 1.25 * std::f64::consts::TAU;
    let a = 0.12;
    let r_end = a * (tightness * turns).exp();
    let mut dots = curve(160, |t| {
        let th = t * turns;
        let r = a * (tightness * th).exp();
        let phi = th - turns;
        (r * phi.cos(), r * phi.sin(), width * (0.6 + 0.4 * t), value)
    });
    dots.extend(curve(90, |t| (r_end - 0.25 * t * t, tail_len * t, width * (1.0 - 0.5 * fade * t), value * (1.0 - 0.25 * fade * t))));
    dots
}

/// Frontal wave: a tapered cloud band buckling poleward, with a soft cloud head on the crest.
fn developing_shape(rng: &mut ChaCha8Rng) -> Vec<Dot> {
    let crest = rng.gen_range(-0.25..0.25);
    let amp = rng.gen_range(0.3..0.5);
    let half = rng.gen_range(0.8..1.0);
    let mut dots = curve(120, |t| {
        let x = (2.0 * t - 1.0) * half;
        let taper = 1.0 - 0.5 * (2.0 * t - 1.0).abs();
        let y = -amp * (-((x - crest) / 0.35).powi(2)).exp();
        (x, y, 0.06 * taper, 0.72 * taper)
    });
    let head = rng.gen_range(0.16..0.22);
    dots.extend(curve(3, |t| (crest + 0.12 * (t - 0.5), -amp - 0.06, head, 0.75)));
    dots
}

fn mature_shape(rng: &mut ChaCha8Rng) -> Vec<Dot> {
    spiral_with_tail(rng.gen_range(0.2..0.24), rng.gen_range(1.2..1.45), 0.065, 0.92, 0.3)
}

/// Loosened spiral cut into fragments that drift apart.
fn declining_shape(rng: &mut ChaCha8Rng) -> Vec<Dot> {
    let base = spiral_with_tail(rng.gen_range(0.27..0.31), rng.gen_range(1.1..1.4), 0.2, 0.6, 1.0);
    let mut dots = Vec::new();
    let mut kept = 0;
    let chunks: Vec<&[Dot]> = base.chunks(12).collect();
    let n = chunks.len();
    for (i, chunk) in chunks.into_iter().enumerate() {
        let keep = rng.gen_bool(0.45) || (kept == 0 && i + 1 == n);
        if !keep {
            continue;
        }
        kept += 1;
        let (dx, dy) = (rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2));
        dots.extend(chunk.iter().map(|&(u, v, r, val)| (u + dx, v + dy, r, val)));
    }
    dots
}

fn box_blur(layer: &Raster, radius: usize) -> Raster {
    let (w, h) = (layer.width(), layer.height());
    let pass = |src: &Raster, horizontal: bool| {
        let mut out = Raster::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut n) = (0.0, 0.0);
                for d in -(radius as isize)..=radius as isize {
                    let (xx, yy) = if horizontal { (x as isize + d, y as isize) } else { (x as isize, y as isize + d) };
                    if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                        acc += src.get(xx as usize, yy as usize);
                        n += 1.0;
                    }
                }
                out.set(x, y, acc / n);
            }
        }
        out
    };
    pass(&pass(layer, true), false)
}

/// Pixel bounds of `layer` above `threshold`, or `None` when nothing is drawn.
fn drawn_extent(layer: &Raster, threshold: f64) -> Option<Rect> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..layer.height() {
        for x in 0..layer.width() {
            if layer.get(x, y) > threshold {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != usize::MAX).then(|| Rect::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
}

const EXTENT_THRESHOLD: f64 = 0.1;
const BOX_MARGIN: f64 = 0.05;

/// Renders one cyclone shape into a fresh layer the size of `canvas` and returns the layer
/// with its box (tight extent plus 5% margin per side, clamped to the image).
fn render_shape(spec: &SynthImageSpec, w: usize, h: usize, canonical: bool) -> Result<(Raster, BoundingBox), SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dots = match spec.stage {
        StageClass::Developing => developing_shape(&mut rng),
        StageClass::Mature => mature_shape(&mut rng),
        StageClass::Declining => declining_shape(&mut rng),
    };
    let (angle, sx, sy) = if canonical {
        (0.0, 1.0, 1.0)
    } else {
        (rng.gen_range(-0.3..0.3), rng.gen_range(0.85..1.15), rng.gen_range(0.85..1.15))
    };
    let pose = Pose {
        cx: spec.center.0 * w as f64,
        cy: spec.center.1 * h as f64,
        unit: spec.size * w.min(h) as f64,
        cos: f64::cos(angle),
        sin: f64::sin(angle),
        sx,
        sy,
    };
    let mut layer = Raster::new(w, h);
    for (u, v, r, val) in dots {
        let (x, y) = pose.to_px(u, v);
        splat(&mut layer, x, y, (r * pose.unit).max(0.7), val);
    }
    if spec.stage == StageClass::Declining {
        layer = box_blur(&layer, ((0.1 * pose.unit).round() as usize).max(1));
    }
    let bbox = margin_box(&layer).ok_or(SynthError::OffCanvas { x: spec.center.0, y: spec.center.1, size: spec.size })?;
    Ok((layer, bbox))
}

/// Tight extent of the drawn pixels plus the margin on every side, normalized and clamped.
fn margin_box(layer: &Raster) -> Option<BoundingBox> {
    let ext = drawn_extent(layer, EXTENT_THRESHOLD)?;
    let (mx, my) = (BOX_MARGIN * ext.width(), BOX_MARGIN * ext.height());
    let r = Rect::new(ext.xmin - mx, ext.ymin - my, ext.xmax + mx, ext.ymax + my)
        .scale(1.0 / layer.width() as f64, 1.0 / layer.height() as f64);
    BoundingBox::clamped(r).ok()
}

fn background(w: usize, h: usize, noise: f64, rng: &mut ChaCha8Rng) -> Raster {
    let mut img = Raster::filled(w, h, 0.08);
    if noise > 0.0 {
        for v in img.data_mut() {
            *v = (*v + rng.gen_range(-noise..=noise)).clamp(0.0, 1.0);
        }
    }
    img
}

fn composite(canvas: &mut Raster, layer: &Raster) {
    for (c, &l) in canvas.data_mut().iter_mut().zip(layer.data()) {
        *c = c.max(l).clamp(0.0, 1.0);
    }
}

/// A 300x300 image holding one cyclone of `spec.stage`, with its box.
pub fn gen_cyclone_image(spec: &SynthImageSpec) -> Result<(Raster, BoundingBox, StageClass), SynthError> {
    let (layer, bbox) = render_shape(spec, IMAGE_SIZE, IMAGE_SIZE, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5bd1_e995);
    let mut img = background(IMAGE_SIZE, IMAGE_SIZE, spec.noise, &mut rng);
    composite(&mut img, &layer);
    Ok((img, bbox, spec.stage))
}

/// Realizations averaged into a canonical shape.
const CANONICAL_DRAWS: u64 = 16;

/// The expected noise-free, unrotated shape of each stage, centered, for template matching:
/// the mean of several seeded draws, boxed like a single draw.
pub fn canonical_shape(stage: StageClass) -> (Raster, BoundingBox) {
    let mut mean = Raster::new(IMAGE_SIZE, IMAGE_SIZE);
    for seed in 0..CANONICAL_DRAWS {
        let spec = SynthImageSpec { stage, center: (0.5, 0.4), size: 0.15, noise: 0.0, seed };
        let (layer, _) = render_shape(&spec, IMAGE_SIZE, IMAGE_SIZE, true).expect("canonical spec is valid");
        for (m, v) in mean.data_mut().iter_mut().zip(layer.data()) {
            *m += v / CANONICAL_DRAWS as f64;
        }
    }
    let bbox = margin_box(&mean).expect("canonical shapes lie on the canvas");
    (mean, bbox)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthDatasetConfig {
    /// Number of cyclones of each stage, indexed by `StageClass::code()`.
    pub counts: [usize; 3],
    pub max_per_frame: usize,
    pub size_range: (f64, f64),
    pub noise: f64,
    /// Faint blobs per frame that carry no label.
    pub clutter: usize,
    pub first_frame: u32,
    pub seed: u64,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        Self {
            counts: [554, 650, 303],
            max_per_frame: 3,
            size_range: (0.1, 0.17),
            noise: 0.05,
            clutter: 2,
            first_frame: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub entries: Vec<(u32, Vec<LabeledBox>)>,
    pub images: HashMap<u32, GrayImage>,
}

impl SynthDataset {
    /// All frames in one split.
    pub fn manifest(&self, split: Split, seed: u64) -> DatasetManifest {
        DatasetManifest {
            entries: self.entries.iter().map(|(frame, boxes)| FrameEntry { frame: *frame, boxes: boxes.clone(), split }).collect(),
            seed,
            ratio: if split == Split::Test { 1.0 } else { 0.0 },
        }
    }

    /// Random frame-level split of the generated frames.
    pub fn split(&self, ratio: f64, seed: u64) -> Result<DatasetManifest, SynthError> {
        Ok(split_train_test(self.entries.clone(), ratio, seed)?)
    }

    pub fn box_count(&self) -> usize {
        self.entries.iter().map(|(_, b)| b.len()).sum()
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;

/// Frames with one to `max_per_frame` cyclones each, pairwise IoU below 0.2.
pub fn gen_dataset(cfg: &SynthDatasetConfig) -> Result<SynthDataset, SynthError> {
    if cfg.max_per_frame == 0 {
        return Err(SynthError::InvalidSpec("max_per_frame must be positive".into()));
    }
    let (lo, hi) = cfg.size_range;
    if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
        return Err(SynthError::InvalidSpec("size_range must satisfy 0 < lo <= hi <= 0.5".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stages: Vec<StageClass> =
        StageClass::ALL.iter().flat_map(|&s| std::iter::repeat(s).take(cfg.counts[s.code()])).collect();
    stages.shuffle(&mut rng);
    let mut queue = std::collections::VecDeque::from(stages);
    let mut out = SynthDataset { entries: Vec::new(), images: HashMap::new() };
    let mut frame = cfg.first_frame;
    while !queue.is_empty() {
        let want = rng.gen_range(1..=cfg.max_per_frame).min(queue.len());
        let mut canvas = background(IMAGE_SIZE, IMAGE_SIZE, cfg.noise, &mut rng);
        for _ in 0..cfg.clutter {
            let (x, y) = (rng.gen_range(0.0..IMAGE_SIZE as f64), rng.gen_range(0.0..IMAGE_SIZE as f64));
            let r = rng.gen_range(4.0..12.0);
            let v = rng.gen_range(0.2..0.45);
            let mut layer = Raster::new(IMAGE_SIZE, IMAGE_SIZE);
            for _ in 0..rng.gen_range(2..5) {
                splat(&mut layer, x + rng.gen_range(-15.0..15.0), y + rng.gen_range(-15.0..15.0), r, v);
            }
            composite(&mut canvas, &layer);
        }
        let mut boxes: Vec<LabeledBox> = Vec::new();
        for _ in 0..want {
            let stage = *queue.front().expect("queue is non-empty");
            let mut placed = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let size = rng.gen_range(lo..=hi);
                let spec = SynthImageSpec {
                    stage,
                    center: (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.75)),
                    size,
                    noise: 0.0,
                    seed: rng.gen(),
                };
                let Ok((layer, bbox)) = render_shape(&spec, IMAGE_SIZE, IMAGE_SIZE, false) else { continue };
                // Keep shapes whole: a clamped box would hide part of the cyclone.
                let ext = drawn_extent(&layer, EXTENT_THRESHOLD).expect("render_shape found an extent");
                if ext.xmin <= 0.0 || ext.ymin <= 0.0 || ext.xmax >= IMAGE_SIZE as f64 || ext.ymax >= IMAGE_SIZE as f64 {
                    continue;
                }
                if boxes.iter().all(|b| b.bbox.iou(&bbox) < MAX_PAIR_IOU) {
                    placed = Some((layer, bbox));
                    break;
                }
            }
            match placed {
                Some((layer, bbox)) => {
                    composite(&mut canvas, &layer);
                    boxes.push(LabeledBox { bbox, stage });
                    queue.pop_front();
                }
                None if boxes.is_empty() => return Err(SynthError::Crowded(PLACEMENT_ATTEMPTS)),
                None => break,
            }
        }
        out.images.insert(frame, canvas.to_gray());
        out.entries.push((frame, boxes));
        frame += 1;
    }
    Ok(out)
}
