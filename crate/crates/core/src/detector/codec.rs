use super::priors::PriorBox;
use super::DetectorError;
use crate::geom::{BoundingBox, Rect};

pub const VARIANCES: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

/// Center-size offsets of `gt` relative to `prior`, scaled by [`VARIANCES`].
pub fn encode_rect(gt: &Rect, prior: &PriorBox) -> Result<[f64; 4], DetectorError> {
    let (w, h) = (gt.width(), gt.height());
    if !(w > 0.0 && h > 0.0) {
        return Err(DetectorError::DegenerateBox { width: w, height: h });
    }
    let (cx, cy) = gt.center();
    Ok([
        (cx - prior.cx) / (prior.w * VARIANCES[0]),
        (cy - prior.cy) / (prior.h * VARIANCES[1]),
        (w / prior.w).ln() / VARIANCES[2],
        (h / prior.h).ln() / VARIANCES[3],
    ])
}

pub fn encode(gt: &BoundingBox, prior: &PriorBox) -> Result<[f64; 4], DetectorError> {
    encode_rect(&gt.rect(), prior)
}

/// Inverse of [`encode_rect`]. The result may extend beyond the unit square.
pub fn decode_rect(t: &[f64; 4], prior: &PriorBox) -> Rect {
    let cx = prior.cx + t[0] * VARIANCES[0] * prior.w;
    let cy = prior.cy + t[1] * VARIANCES[1] * prior.h;
    let w = prior.w * (t[2] * VARIANCES[2]).exp();
    let h = prior.h * (t[3] * VARIANCES[3]).exp();
    Rect::from_center(cx, cy, w, h)
}

/// Decodes and clamps to the image; `None` if nothing of the box is left.
pub fn decode(t: &[f64; 4], prior: &PriorBox) -> Option<BoundingBox> {
    BoundingBox::clamped(decode_rect(t, prior)).ok()
}
