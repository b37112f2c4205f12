//! Precision-recall curves, average precision and mAP with VOC-style greedy matching.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::BoundingBox;
use crate::labelstore::StageClass;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no class has ground truth")]
    NoClasses,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// Area under the monotone envelope of the curve.
    #[default]
    AllPoint,
    /// Mean of the envelope at recall 0, 0.1, ..., 1.
    #[serde(rename = "11-point")]
    ElevenPoint,
}

impl Interpolation {
    pub fn name(self) -> &'static str {
        match self {
            Interpolation::AllPoint => "all-point",
            Interpolation::ElevenPoint => "11-point",
        }
    }
}

/// A scored detection on image `image`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image: u32,
    pub bbox: BoundingBox,
    pub stage: StageClass,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image: u32,
    pub bbox: BoundingBox,
    pub stage: StageClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub num_gt: usize,
    pub tp: usize,
    pub fp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub stage: StageClass,
    pub ap: f64,
    pub curve: PrCurve,
    pub num_det: usize,
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

/// Greedy score-ordered matching of one class. Each detection takes the highest-IoU
/// unmatched ground truth on its image when that IoU exceeds `iou_threshold`; equal
/// scores are visited in input order.
pub fn pr_curve(dets: &[ScoredBox], gts: &[GroundTruth], iou_threshold: f64) -> PrCurve {
    let mut by_image: HashMap<u32, Vec<(BoundingBox, bool)>> = HashMap::new();
    for g in gts {
        by_image.entry(g.image).or_default().push((g.bbox, false));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::with_capacity(dets.len());
    for i in order {
        let d = &dets[i];
        let mut hit = false;
        if let Some(cands) = by_image.get_mut(&d.image) {
            let mut best: Option<(usize, f64)> = None;
            for (j, (g, used)) in cands.iter().enumerate() {
                let v = g.iou(&d.bbox);
                if !*used && v > iou_threshold && best.map_or(true, |(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                cands[j].1 = true;
                hit = true;
            }
        }
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let recall = if gts.is_empty() { 0.0 } else { tp as f64 / gts.len() as f64 };
        points.push(PrPoint { recall, precision: tp as f64 / (tp + fp) as f64, score: d.score });
    }
    PrCurve { points, num_gt: gts.len(), tp, fp }
}

pub fn average_precision(curve: &PrCurve, mode: Interpolation) -> f64 {
    if curve.num_gt == 0 || curve.points.is_empty() {
        return 0.0;
    }
    // Envelope: precision made non-increasing in recall, scanning from the end.
    let mut env: Vec<f64> = curve.points.iter().map(|p| p.precision).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    match mode {
        Interpolation::AllPoint => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (p, &e) in curve.points.iter().zip(&env) {
                if p.recall > prev_recall {
                    ap += (p.recall - prev_recall) * e;
                    prev_recall = p.recall;
                }
            }
            ap
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|k| {
                    let r = k as f64 / 10.0;
                    curve.points.iter().zip(&env).filter(|(p, _)| p.recall >= r).map(|(_, &e)| e).fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// Per-class results for every class with at least one ground truth, in class order.
pub fn evaluate(dets: &[ScoredBox], gts: &[GroundTruth], iou_threshold: f64, mode: Interpolation) -> Vec<ApResult> {
    StageClass::ALL
        .into_iter()
        .filter_map(|stage| {
            let g: Vec<GroundTruth> = gts.iter().filter(|g| g.stage == stage).copied().collect();
            if g.is_empty() {
                return None;
            }
            let d: Vec<ScoredBox> = dets.iter().filter(|d| d.stage == stage).copied().collect();
            let curve = pr_curve(&d, &g, iou_threshold);
            Some(ApResult { stage, ap: average_precision(&curve, mode), curve, num_det: d.len() })
        })
        .collect()
}

/// Unweighted mean of per-class AP.
pub fn mean_ap(results: &[ApResult]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::NoClasses);
    }
    Ok(results.iter().map(|r| r.ap).sum::<f64>() / results.len() as f64)
}

#[derive(Serialize)]
struct ReportRow<'a> {
    class: &'a str,
    ap: f64,
    num_gt: usize,
    num_det: usize,
}

/// CSV report preceded by a `# iou_threshold=..,interpolation=..` line. A final `mAP` row
/// carries the mean.
pub fn write_report<W: Write>(mut w: W, results: &[ApResult], iou_threshold: f64, mode: Interpolation) -> Result<(), EvalError> {
    writeln!(w, "# iou_threshold={iou_threshold},interpolation={}", mode.name())?;
    let mut out = csv::Writer::from_writer(w);
    for r in results {
        out.serialize(ReportRow { class: r.stage.name(), ap: r.ap, num_gt: r.curve.num_gt, num_det: r.num_det })?;
    }
    let map = mean_ap(results)?;
    out.serialize(ReportRow {
        class: "mAP",
        ap: map,
        num_gt: results.iter().map(|r| r.curve.num_gt).sum(),
        num_det: results.iter().map(|r| r.num_det).sum(),
    })?;
    out.flush()?;
    Ok(())
}

/// Per-curve dump: `class,recall,precision,score`.
pub fn write_curves<W: Write>(w: W, results: &[ApResult]) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["class", "recall", "precision", "score"])?;
    for r in results {
        for p in &r.curve.points {
            out.write_record([r.stage.name().to_string(), p.recall.to_string(), p.precision.to_string(), p.score.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn gt(image: u32, b: BoundingBox) -> GroundTruth {
        GroundTruth { image, bbox: b, stage: StageClass::Mature }
    }

    fn det(image: u32, b: BoundingBox, score: f64) -> ScoredBox {
        ScoredBox { image, bbox: b, stage: StageClass::Mature, score }
    }

    #[test]
    fn iou_cases() {
        let a = bb(0.0, 0.0, 0.5, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(0.6, 0.6, 0.9, 0.9)), 0.0);
        let l = bb(0.0, 0.0, 0.5, 1.0);
        let r = bb(0.25, 0.0, 0.75, 1.0);
        assert!((iou(&l, &r) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&l, &r), iou(&r, &l));
    }

    #[test]
    fn single_perfect_detection() {
        let b = bb(0.1, 0.1, 0.4, 0.4);
        let c = pr_curve(&[det(0, b, 0.9)], &[gt(0, b)], 0.5);
        assert_eq!(c.points, vec![PrPoint { recall: 1.0, precision: 1.0, score: 0.9 }]);
        assert_eq!(average_precision(&c, Interpolation::AllPoint), 1.0);
        assert_eq!(average_precision(&c, Interpolation::ElevenPoint), 1.0);
    }

    #[test]
    fn off_target_detections() {
        let c = pr_curve(&[det(0, bb(0.6, 0.6, 0.9, 0.9), 0.9), det(1, bb(0.1, 0.1, 0.4, 0.4), 0.8)], &[gt(0, bb(0.1, 0.1, 0.4, 0.4))], 0.5);
        assert!(c.points.iter().all(|p| p.precision == 0.0));
        assert_eq!(average_precision(&c, Interpolation::AllPoint), 0.0);
    }

    #[test]
    fn tp_fp_tp_hand_case() {
        let g1 = bb(0.0, 0.0, 0.2, 0.2);
        let g2 = bb(0.5, 0.5, 0.7, 0.7);
        let dets = [det(0, g1, 0.9), det(0, bb(0.8, 0.0, 0.95, 0.1), 0.8), det(0, g2, 0.7)];
        let c = pr_curve(&dets, &[gt(0, g1), gt(0, g2)], 0.5);
        let rp: Vec<(f64, f64)> = c.points.iter().map(|p| (p.recall, p.precision)).collect();
        assert_eq!(rp[0], (0.5, 1.0));
        assert_eq!(rp[1], (0.5, 0.5));
        assert!((rp[2].0 - 1.0).abs() < 1e-15 && (rp[2].1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((average_precision(&c, Interpolation::AllPoint) - 0.833_333_333_3).abs() < 1e-9);
    }

    #[test]
    fn duplicates_count_once() {
        let b = bb(0.1, 0.1, 0.4, 0.4);
        let c = pr_curve(&[det(0, b, 0.9), det(0, b, 0.8), det(0, b, 0.7)], &[gt(0, b)], 0.5);
        assert_eq!((c.tp, c.fp), (1, 2));
    }

    #[test]
    fn threshold_is_strict() {
        let l = bb(0.0, 0.0, 0.5, 1.0);
        let r = bb(0.25, 0.0, 0.75, 1.0);
        assert_eq!(pr_curve(&[det(0, r, 0.9)], &[gt(0, l)], 1.0 / 3.0).tp, 0);
        assert_eq!(pr_curve(&[det(0, r, 0.9)], &[gt(0, l)], 0.3).tp, 1);
    }

    #[test]
    fn map_is_unweighted_and_missing_class_counts_zero() {
        let b = bb(0.1, 0.1, 0.4, 0.4);
        let gts = vec![gt(0, b), GroundTruth { image: 0, bbox: b, stage: StageClass::Declining }];
        let r = evaluate(&[det(0, b, 0.9)], &gts, 0.5, Interpolation::AllPoint);
        assert_eq!(r.len(), 2);
        assert_eq!(mean_ap(&r).unwrap(), 0.5);
        assert!(matches!(mean_ap(&[]), Err(EvalError::NoClasses)));
        let single = evaluate(&[det(0, b, 0.9)], &gts[..1], 0.5, Interpolation::AllPoint);
        assert_eq!(mean_ap(&single).unwrap(), single[0].ap);
    }

    #[test]
    fn report_layout() {
        let b = bb(0.1, 0.1, 0.4, 0.4);
        let r = evaluate(&[det(0, b, 0.9)], &[gt(0, b)], 0.5, Interpolation::AllPoint);
        let mut buf = Vec::new();
        write_report(&mut buf, &r, 0.5, Interpolation::AllPoint).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# iou_threshold=0.5,interpolation=all-point");
        assert_eq!(lines[1], "class,ap,num_gt,num_det");
        assert_eq!(lines[2], "mature,1.0,1,1");
        assert!(lines[3].starts_with("mAP,1.0"));
    }

    proptest! {
        #[test]
        fn permuting_detections_keeps_curve(seed in 0u64..10_000) {
            use rand::{seq::SliceRandom, Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut boxes = || {
                let x = rng.gen_range(0.0..0.7);
                let y = rng.gen_range(0.0..0.7);
                bb(x, y, x + rng.gen_range(0.05..0.3), y + rng.gen_range(0.05..0.3))
            };
            let gts: Vec<_> = (0..4).map(|i| gt(i % 2, boxes())).collect();
            let mut dets: Vec<_> = (0..8).map(|i| det(i % 2, boxes(), 0.05 + 0.1 * i as f64)).collect();
            let a = pr_curve(&dets, &gts, 0.3);
            dets.shuffle(&mut rng);
            let b = pr_curve(&dets, &gts, 0.3);
            prop_assert_eq!(a, b);
            let ap = average_precision(&pr_curve(&dets, &gts, 0.3), Interpolation::AllPoint);
            prop_assert!((0.0..=1.0).contains(&ap));
        }
    }
}
