//! Training-time preprocessing of (image, boxes) samples.
//!
//! The chain is photometric distortion, conversion to pixel coordinates, random sample crop,
//! random mirroring, conversion back to normalized coordinates and a final bilinear resize.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{BoundingBox, Rect};
use crate::labelstore::{LabeledBox, StageClass};
use crate::raster::Raster;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Raster,
    pub boxes: Vec<LabeledBox>,
}

/// A sample whose boxes are in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsoluteSample {
    pub image: Raster,
    pub boxes: Vec<(Rect, StageClass)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropConstraint {
    /// Keep the whole image.
    Whole,
    /// At least one box must overlap the window with this IoU.
    MinIou(f64),
    /// Any window with a surviving box is accepted.
    Any,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub brightness_delta: f64,
    pub contrast_range: (f64, f64),
    pub crop_choices: Vec<CropConstraint>,
    /// Side of the crop window as a fraction of the image side.
    pub crop_scale_range: (f64, f64),
    pub crop_aspect_range: (f64, f64),
    pub crop_attempts: usize,
    pub mirror_prob: f64,
    pub output_size: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            brightness_delta: 0.125,
            contrast_range: (0.5, 1.5),
            crop_choices: vec![
                CropConstraint::Whole,
                CropConstraint::MinIou(0.1),
                CropConstraint::MinIou(0.3),
                CropConstraint::MinIou(0.5),
                CropConstraint::MinIou(0.7),
                CropConstraint::MinIou(0.9),
                CropConstraint::Any,
            ],
            crop_scale_range: (0.3, 1.0),
            crop_aspect_range: (0.5, 2.0),
            crop_attempts: 50,
            mirror_prob: 0.5,
            output_size: 300,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.mirror_prob) {
            return Err(format!("mirror_prob {} outside [0, 1]", self.mirror_prob));
        }
        if self.output_size == 0 {
            return Err("output_size must be positive".into());
        }
        if self.brightness_delta < 0.0 || !(self.contrast_range.0 > 0.0 && self.contrast_range.0 <= self.contrast_range.1) {
            return Err("photometric ranges are invalid".into());
        }
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err("crop_scale_range must satisfy 0 < lo <= hi <= 1".into());
        }
        if self.crop_choices.is_empty() {
            return Err("crop_choices is empty".into());
        }
        for c in &self.crop_choices {
            if let CropConstraint::MinIou(v) = c {
                if !(0.0..=1.0).contains(v) {
                    return Err(format!("crop min IoU {v} outside [0, 1]"));
                }
            }
        }
        Ok(())
    }
}

/// `x' = clamp(contrast * x + brightness, 0, 1)`.
pub fn adjust_photometric(sample: &Sample, brightness: f64, contrast: f64) -> Sample {
    let mut out = sample.clone();
    out.image.map_in_place(|v| (contrast * v + brightness).clamp(0.0, 1.0));
    out
}

pub fn photometric_distort<R: Rng>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let brightness = if cfg.brightness_delta > 0.0 {
        rng.gen_range(-cfg.brightness_delta..=cfg.brightness_delta)
    } else {
        0.0
    };
    let (lo, hi) = cfg.contrast_range;
    let contrast = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    adjust_photometric(sample, brightness, contrast)
}

pub fn to_absolute(sample: &Sample) -> AbsoluteSample {
    let (w, h) = (sample.image.width() as f64, sample.image.height() as f64);
    AbsoluteSample {
        image: sample.image.clone(),
        boxes: sample.boxes.iter().map(|b| (b.bbox.rect().scale(w, h), b.stage)).collect(),
    }
}

/// Inverse of [`to_absolute`]. Boxes that fall outside the image after normalization are
/// clamped; degenerate ones are dropped.
pub fn to_relative(sample: &AbsoluteSample) -> Sample {
    let (w, h) = (sample.image.width() as f64, sample.image.height() as f64);
    let boxes = sample
        .boxes
        .iter()
        .filter_map(|(r, stage)| {
            BoundingBox::clamped(r.scale(1.0 / w, 1.0 / h)).ok().map(|bbox| LabeledBox { bbox, stage: *stage })
        })
        .collect();
    Sample { image: sample.image.clone(), boxes }
}

/// Cuts `window` (integer pixel bounds) out of the sample. Boxes are kept iff their center lies
/// strictly inside the window, then clipped and shifted. `None` if no box survives.
pub fn crop_to_window(sample: &AbsoluteSample, window: (usize, usize, usize, usize)) -> Option<AbsoluteSample> {
    let (x0, y0, w, h) = window;
    let win = Rect::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64);
    let boxes: Vec<(Rect, StageClass)> = sample
        .boxes
        .iter()
        .filter(|(r, _)| {
            let (cx, cy) = r.center();
            win.contains_point(cx, cy)
        })
        .map(|(r, s)| {
            let c = r.clip(&win);
            (Rect::new(c.xmin - win.xmin, c.ymin - win.ymin, c.xmax - win.xmin, c.ymax - win.ymin), *s)
        })
        .collect();
    if boxes.is_empty() {
        return None;
    }
    Some(AbsoluteSample { image: sample.image.crop(x0, y0, w, h), boxes })
}

/// Random sample crop: pick a constraint, then try up to `crop_attempts` windows. Falls back
/// to the untouched sample.
pub fn random_crop<R: Rng>(sample: &AbsoluteSample, cfg: &AugmentConfig, rng: &mut R) -> AbsoluteSample {
    if sample.boxes.is_empty() {
        return sample.clone();
    }
    let (img_w, img_h) = (sample.image.width(), sample.image.height());
    let constraint = cfg.crop_choices[rng.gen_range(0..cfg.crop_choices.len())];
    if constraint == CropConstraint::Whole {
        return sample.clone();
    }
    let (slo, shi) = cfg.crop_scale_range;
    let (alo, ahi) = cfg.crop_aspect_range;
    for _ in 0..cfg.crop_attempts {
        let w = (rng.gen_range(slo..=shi) * img_w as f64).round() as usize;
        let h = (rng.gen_range(slo..=shi) * img_h as f64).round() as usize;
        if w == 0 || h == 0 || w > img_w || h > img_h {
            continue;
        }
        let aspect = h as f64 / w as f64;
        if aspect < alo || aspect > ahi {
            continue;
        }
        let x0 = rng.gen_range(0..=img_w - w);
        let y0 = rng.gen_range(0..=img_h - h);
        if let CropConstraint::MinIou(min_iou) = constraint {
            let win = Rect::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64);
            let best = sample.boxes.iter().map(|(r, _)| r.iou(&win)).fold(0.0, f64::max);
            if best < min_iou {
                continue;
            }
        }
        if let Some(out) = crop_to_window(sample, (x0, y0, w, h)) {
            return out;
        }
    }
    sample.clone()
}

/// Horizontal flip: `x'min = 1 - xmax`, `x'max = 1 - xmin`.
pub fn flip(sample: &Sample) -> Sample {
    let boxes = sample
        .boxes
        .iter()
        .map(|b| {
            let r = b.bbox.rect();
            let bbox = BoundingBox::clamped(Rect::new(1.0 - r.xmax, r.ymin, 1.0 - r.xmin, r.ymax))
                .expect("reflection of a valid box is valid");
            LabeledBox { bbox, stage: b.stage }
        })
        .collect();
    Sample { image: sample.image.flip_horizontal(), boxes }
}

pub fn mirror<R: Rng>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    if rng.gen_bool(cfg.mirror_prob) {
        flip(sample)
    } else {
        sample.clone()
    }
}

/// Square bilinear resize; normalized boxes are unchanged.
pub fn resize(sample: &Sample, output_size: usize) -> Sample {
    Sample { image: sample.image.resize_bilinear(output_size, output_size), boxes: sample.boxes.clone() }
}

/// The full training chain.
pub fn augment<R: Rng>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let s = photometric_distort(sample, cfg, rng);
    let abs = random_crop(&to_absolute(&s), cfg, rng);
    let s = mirror(&to_relative(&abs), cfg, rng);
    resize(&s, cfg.output_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(w: usize, h: usize, boxes: &[(f64, f64, f64, f64)]) -> Sample {
        let data = (0..w * h).map(|i| (i % 17) as f64 / 16.0).collect();
        Sample {
            image: Raster::from_vec(w, h, data),
            boxes: boxes
                .iter()
                .map(|&(a, b, c, d)| LabeledBox { bbox: BoundingBox::new(a, b, c, d).unwrap(), stage: StageClass::Mature })
                .collect(),
        }
    }

    #[test]
    fn identity_photometric() {
        let s = sample(20, 10, &[(0.1, 0.2, 0.4, 0.5)]);
        assert_eq!(adjust_photometric(&s, 0.0, 1.0), s);
    }

    #[test]
    fn brightness_clamps() {
        let s = Sample { image: Raster::filled(5, 5, 0.9), boxes: vec![] };
        let out = adjust_photometric(&s, 0.2, 1.0);
        assert!(out.image.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn photometric_never_moves_boxes() {
        let s = sample(20, 10, &[(0.1, 0.2, 0.4, 0.5), (0.5, 0.5, 0.9, 0.9)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(photometric_distort(&s, &AugmentConfig::default(), &mut rng).boxes, s.boxes);
        }
    }

    #[test]
    fn absolute_scaling() {
        let s = sample(300, 300, &[(0.1, 0.2, 0.4, 0.5)]);
        let a = to_absolute(&s);
        let r = a.boxes[0].0;
        assert!((r.xmin - 30.0).abs() < 1e-9 && (r.ymin - 60.0).abs() < 1e-9);
        assert!((r.xmax - 120.0).abs() < 1e-9 && (r.ymax - 150.0).abs() < 1e-9);
        let back = to_relative(&a);
        for (x, y) in back.boxes.iter().zip(&s.boxes) {
            assert!((x.bbox.xmin() - y.bbox.xmin()).abs() < 1e-9);
            assert!((x.bbox.ymax() - y.bbox.ymax()).abs() < 1e-9);
        }
        let one = sample(1, 1, &[(0.1, 0.2, 0.4, 0.5)]);
        assert_eq!(to_absolute(&one).boxes[0].0, one.boxes[0].bbox.rect());
    }

    #[test]
    fn whole_window_crop_is_identity() {
        let s = to_absolute(&sample(40, 30, &[(0.1, 0.2, 0.4, 0.5)]));
        assert_eq!(crop_to_window(&s, (0, 0, 40, 30)).unwrap(), s);
    }

    #[test]
    fn box_with_center_outside_window_is_dropped() {
        let s = to_absolute(&sample(100, 100, &[(0.1, 0.1, 0.3, 0.3), (0.6, 0.6, 0.9, 0.9)]));
        let out = crop_to_window(&s, (50, 50, 50, 50)).unwrap();
        assert_eq!(out.boxes.len(), 1);
        assert_eq!(out.boxes[0].0, Rect::new(10.0, 10.0, 40.0, 40.0));
        assert!(crop_to_window(&s, (40, 0, 10, 10)).is_none());
    }

    #[test]
    fn mirror_arithmetic_and_involution() {
        let s = sample(10, 10, &[(0.1, 0.2, 0.4, 0.5)]);
        let m = flip(&s);
        let b = m.boxes[0].bbox;
        assert!((b.xmin() - 0.6).abs() < 1e-12 && (b.xmax() - 0.9).abs() < 1e-12);
        assert_eq!((b.ymin(), b.ymax()), (0.2, 0.5));
        let twice = flip(&m);
        assert_eq!(twice.image, s.image);
        assert!((twice.boxes[0].bbox.xmin() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn resize_to_output_size() {
        let s = sample(123, 77, &[(0.1, 0.2, 0.4, 0.5)]);
        let r = resize(&s, 300);
        assert_eq!((r.image.width(), r.image.height()), (300, 300));
        assert_eq!(r.boxes, s.boxes);
    }

    #[test]
    fn chain_is_deterministic_under_seed() {
        let s = sample(120, 90, &[(0.1, 0.2, 0.4, 0.5), (0.6, 0.1, 0.95, 0.4)]);
        let cfg = AugmentConfig { output_size: 64, ..Default::default() };
        let a = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn thousand_seeded_crops_keep_valid_boxes() {
        let s = to_absolute(&sample(100, 80, &[(0.05, 0.1, 0.3, 0.5), (0.4, 0.4, 0.9, 0.95), (0.7, 0.05, 0.8, 0.2)]));
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..1000 {
            let c = random_crop(&s, &cfg, &mut rng);
            assert!(!c.boxes.is_empty());
            let rel = to_relative(&c);
            assert_eq!(rel.boxes.len(), c.boxes.len());
            for b in &rel.boxes {
                assert!(b.bbox.xmin() >= 0.0 && b.bbox.xmax() <= 1.0 && b.bbox.xmin() < b.bbox.xmax());
                assert!(b.bbox.ymin() >= 0.0 && b.bbox.ymax() <= 1.0 && b.bbox.ymin() < b.bbox.ymax());
            }
        }
    }

    proptest! {
        #[test]
        fn full_chain_preserves_box_validity(seed in any::<u64>(), x in 0.0f64..0.7, y in 0.0f64..0.7, w in 0.05f64..0.3, h in 0.05f64..0.3) {
            let s = sample(60, 45, &[(x, y, x + w, y + h)]);
            let cfg = AugmentConfig { output_size: 32, ..Default::default() };
            let out = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(out.image.width(), 32);
            for b in &out.boxes {
                prop_assert!(BoundingBox::new(b.bbox.xmin(), b.bbox.ymin(), b.bbox.xmax(), b.bbox.ymax()).is_ok());
            }
            prop_assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
