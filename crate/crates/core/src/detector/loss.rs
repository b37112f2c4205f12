use serde::{Deserialize, Serialize};

use super::matching::{MatchAssignment, PriorTarget};
use super::{DetectorError, Real};

/// Per-prior network outputs for one image: `offsets[p*4..p*4+4]` and
/// `logits[p*n_labels..(p+1)*n_labels]`, label 0 being background.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorPredictions {
    pub n_priors: usize,
    pub n_labels: usize,
    pub offsets: Vec<Real>,
    pub logits: Vec<Real>,
}

impl PriorPredictions {
    pub fn zeros(n_priors: usize, n_labels: usize) -> Self {
        Self { n_priors, n_labels, offsets: vec![0.0; n_priors * 4], logits: vec![0.0; n_priors * n_labels] }
    }

    pub fn offsets_of(&self, p: usize) -> &[Real] {
        &self.offsets[p * 4..p * 4 + 4]
    }

    pub fn logits_of(&self, p: usize) -> &[Real] {
        &self.logits[p * self.n_labels..(p + 1) * self.n_labels]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub conf: f64,
    pub loc: f64,
    pub alpha: f64,
    pub n: usize,
    pub total: f64,
}

impl LossBreakdown {
    pub fn zero(alpha: f64) -> Self {
        Self { conf: 0.0, loc: 0.0, alpha, n: 0, total: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub neg_pos_ratio: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 1.0, neg_pos_ratio: 3 }
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

#[inline]
fn smooth_l1_r(x: Real) -> (Real, Real) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Row-wise log-sum-exp of a `rows x cols` matrix.
fn log_sum_exp_rows(logits: &[Real], cols: usize) -> Vec<Real> {
    logits
        .chunks_exact(cols)
        .map(|row| {
            let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            m + row.iter().map(|&v| (v - m).exp()).sum::<Real>().ln()
        })
        .collect()
}

/// Background priors with the largest background log-loss, at most `ratio * positives`.
/// Ties go to the lower prior index.
pub fn mine_hard_negatives(pred: &PriorPredictions, assignment: &MatchAssignment, ratio: usize) -> Vec<usize> {
    let lse = log_sum_exp_rows(&pred.logits, pred.n_labels);
    let n_pos = assignment.num_positive();
    let mut neg: Vec<(usize, Real)> = (0..pred.n_priors)
        .filter(|&p| !assignment.is_positive(p))
        .map(|p| (p, lse[p] - pred.logits[p * pred.n_labels]))
        .collect();
    neg.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    neg.truncate(ratio * n_pos);
    neg.into_iter().map(|(p, _)| p).collect()
}

fn check_shapes(pred: &PriorPredictions, assignment: &MatchAssignment) -> Result<(), DetectorError> {
    if pred.n_labels < 2
        || pred.offsets.len() != pred.n_priors * 4
        || pred.logits.len() != pred.n_priors * pred.n_labels
        || assignment.len() != pred.n_priors
    {
        return Err(DetectorError::Shape(format!(
            "{} priors x {} labels with {} offsets, {} logits and {} targets",
            pred.n_priors,
            pred.n_labels,
            pred.offsets.len(),
            pred.logits.len(),
            assignment.len()
        )));
    }
    for t in &assignment.targets {
        if t.label() >= pred.n_labels {
            return Err(DetectorError::Shape(format!("target label {} with {} labels", t.label(), pred.n_labels)));
        }
    }
    Ok(())
}

/// Multibox loss over a batch and its gradient with respect to every prediction.
///
/// Confidence and localization sums run over all images; both are divided by the total
/// number of positive priors in the batch. Hard negatives are mined per image.
pub fn multibox_loss_with_grad(
    preds: &[PriorPredictions],
    assignments: &[MatchAssignment],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<PriorPredictions>), DetectorError> {
    if preds.len() != assignments.len() {
        return Err(DetectorError::Shape(format!("{} predictions for {} assignments", preds.len(), assignments.len())));
    }
    for (p, a) in preds.iter().zip(assignments) {
        check_shapes(p, a)?;
    }
    let mut grads: Vec<PriorPredictions> = preds.iter().map(|p| PriorPredictions::zeros(p.n_priors, p.n_labels)).collect();
    let n: usize = assignments.iter().map(MatchAssignment::num_positive).sum();
    if n == 0 {
        return Ok((LossBreakdown::zero(cfg.alpha), grads));
    }
    let scale = 1.0 / n as Real;
    let alpha = cfg.alpha as Real;
    let (mut conf, mut loc) = (0.0 as Real, 0.0 as Real);
    for ((pred, assignment), grad) in preds.iter().zip(assignments).zip(grads.iter_mut()) {
        let lse = log_sum_exp_rows(&pred.logits, pred.n_labels);
        let negatives = mine_hard_negatives(pred, assignment, cfg.neg_pos_ratio);
        let conf_rows = assignment.positives().chain(negatives.iter().copied());
        for p in conf_rows {
            let label = assignment.targets[p].label();
            let row = pred.logits_of(p);
            conf += lse[p] - row[label];
            let g = &mut grad.logits[p * pred.n_labels..(p + 1) * pred.n_labels];
            for (k, (gk, &z)) in g.iter_mut().zip(row).enumerate() {
                let prob = (z - lse[p]).exp();
                *gk = scale * (prob - if k == label { 1.0 } else { 0.0 });
            }
        }
        for (p, t) in assignment.targets.iter().enumerate() {
            if let PriorTarget::Object { offsets, .. } = t {
                for k in 0..4 {
                    let (v, d) = smooth_l1_r(pred.offsets[p * 4 + k] - offsets[k] as Real);
                    loc += v;
                    grad.offsets[p * 4 + k] = scale * alpha * d;
                }
            }
        }
    }
    let (conf, loc) = (conf as f64, loc as f64);
    let total = (conf + cfg.alpha * loc) / n as f64;
    if !total.is_finite() {
        return Err(DetectorError::NonFiniteLoss { conf, loc });
    }
    Ok((LossBreakdown { conf, loc, alpha: cfg.alpha, n, total }, grads))
}

/// Loss of a single image; see [`multibox_loss_with_grad`].
pub fn multibox_loss(
    pred: &PriorPredictions,
    assignment: &MatchAssignment,
    alpha: f64,
    neg_pos_ratio: usize,
) -> Result<LossBreakdown, DetectorError> {
    let cfg = LossConfig { alpha, neg_pos_ratio };
    multibox_loss_with_grad(std::slice::from_ref(pred), std::slice::from_ref(assignment), &cfg).map(|(l, _)| l)
}
