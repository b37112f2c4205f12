use super::codec::encode;
use super::priors::PriorBox;
use super::DetectorError;
use crate::labelstore::{LabeledBox, StageClass};

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorTarget {
    Background,
    Object { gt: usize, stage: StageClass, offsets: [f64; 4] },
}

impl PriorTarget {
    /// 0 for background, `stage.code() + 1` otherwise.
    pub fn label(&self) -> usize {
        match self {
            PriorTarget::Background => 0,
            PriorTarget::Object { stage, .. } => stage.code() + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchAssignment {
    pub targets: Vec<PriorTarget>,
}

impl MatchAssignment {
    pub fn background(n_priors: usize) -> Self {
        Self { targets: vec![PriorTarget::Background; n_priors] }
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.targets.iter().enumerate().filter(|(_, t)| !matches!(t, PriorTarget::Background)).map(|(i, _)| i)
    }

    pub fn is_positive(&self, prior: usize) -> bool {
        !matches!(self.targets[prior], PriorTarget::Background)
    }

    pub fn num_positive(&self) -> usize {
        self.positives().count()
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Each ground truth claims its best prior; any other prior with IoU above `iou_threshold`
/// against its best ground truth becomes positive too. Ties go to the lower gt index.
pub fn match_priors(priors: &[PriorBox], gts: &[LabeledBox], iou_threshold: f64) -> Result<MatchAssignment, DetectorError> {
    if priors.is_empty() {
        return Err(DetectorError::Config("no priors".into()));
    }
    let mut out = MatchAssignment::background(priors.len());
    if gts.is_empty() {
        return Ok(out);
    }
    let corners: Vec<_> = priors.iter().map(PriorBox::corners).collect();
    let table: Vec<Vec<f64>> = gts.iter().map(|gt| corners.iter().map(|c| gt.bbox.rect().iou(c)).collect()).collect();
    let mut owner: Vec<Option<usize>> = (0..priors.len())
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, row) in table.iter().enumerate() {
                if row[p] > iou_threshold && best.map_or(true, |(_, b)| row[p] > b) {
                    best = Some((g, row[p]));
                }
            }
            best.map(|(g, _)| g)
        })
        .collect();
    // Forced matches in gt order. A gt whose best prior was already forced by a lower index
    // takes its best remaining prior.
    let mut forced = vec![false; priors.len()];
    for (g, row) in table.iter().enumerate() {
        let mut pick: Option<usize> = None;
        for (p, &iou) in row.iter().enumerate() {
            if !forced[p] && pick.map_or(true, |q| iou > row[q]) {
                pick = Some(p);
            }
        }
        if let Some(p) = pick {
            forced[p] = true;
            owner[p] = Some(g);
        }
    }
    for (p, o) in owner.into_iter().enumerate() {
        if let Some(g) = o {
            out.targets[p] = PriorTarget::Object { gt: g, stage: gts[g].stage, offsets: encode(&gts[g].bbox, &priors[p])? };
        }
    }
    Ok(out)
}
