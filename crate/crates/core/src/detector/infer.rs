use serde::{Deserialize, Serialize};

use super::codec::decode;
use super::nn::MiniSsd;
use super::{Detection, DetectorError, Real};
use crate::labelstore::StageClass;
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub top_k: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { score_threshold: 0.5, nms_iou: 0.45, top_k: 200 }
    }
}

/// Greedy NMS within each class. Output is sorted by descending score; equal scores keep
/// input order.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept.iter().all(|&k| dets[k].stage != d.stage || dets[k].bbox.iou(&d.bbox) <= iou_threshold) {
            kept.push(i);
        }
    }
    let mut slots: Vec<Option<Detection>> = dets.drain(..).map(Some).collect();
    kept.into_iter().map(|i| slots[i].take().expect("each index kept once")).collect()
}

fn softmax(row: &[Real]) -> Vec<f64> {
    let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let e: Vec<f64> = row.iter().map(|&v| ((v - m) as f64).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn infer(model: &MiniSsd, image: &Raster, cfg: &InferConfig) -> Result<Vec<Detection>, DetectorError> {
    let pred = model.predict(&model.input_from_raster(image)?)?;
    let mut candidates = Vec::new();
    for (p, prior) in model.priors().iter().enumerate() {
        let probs = softmax(pred.logits_of(p));
        let offsets = pred.offsets_of(p);
        let t = [offsets[0] as f64, offsets[1] as f64, offsets[2] as f64, offsets[3] as f64];
        let Some(bbox) = decode(&t, prior) else { continue };
        for (label, &score) in probs.iter().enumerate().skip(1) {
            if score > cfg.score_threshold {
                let stage = StageClass::from_code(label - 1).expect("label within class count");
                candidates.push(Detection { bbox, stage, score });
            }
        }
    }
    let mut out = nms(candidates, cfg.nms_iou);
    out.truncate(cfg.top_k);
    Ok(out)
}
