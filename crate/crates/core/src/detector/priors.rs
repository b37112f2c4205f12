use serde::{Deserialize, Serialize};

use super::DetectorError;
use crate::geom::Rect;

/// Normalized center-size prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl PriorBox {
    pub fn corners(&self) -> Rect {
        Rect::from_center(self.cx, self.cy, self.w, self.h)
    }

    pub fn from_corners(r: &Rect) -> Self {
        let (cx, cy) = r.center();
        Self { cx, cy, w: r.width(), h: r.height() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub feature_map_sizes: Vec<usize>,
    pub scales: Vec<f64>,
    /// Aspect ratios (w/h) per map.
    pub aspect_ratios: Vec<Vec<f64>>,
    pub clip: bool,
}

impl Default for PriorConfig {
    fn default() -> Self {
        let ratios = vec![1.0, 2.0, 0.5];
        Self {
            feature_map_sizes: vec![18, 9, 5, 3],
            scales: vec![0.15, 0.35, 0.55, 0.75],
            aspect_ratios: vec![ratios; 4],
            clip: true,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let n = self.feature_map_sizes.len();
        let bad = |msg: String| Err(DetectorError::Config(msg));
        if n == 0 {
            return bad("no feature maps".into());
        }
        if self.scales.len() != n || self.aspect_ratios.len() != n {
            return bad(format!(
                "{} maps, {} scales and {} ratio lists must align",
                n,
                self.scales.len(),
                self.aspect_ratios.len()
            ));
        }
        if self.feature_map_sizes.contains(&0) {
            return bad("feature map size 0".into());
        }
        if self.scales.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return bad("scales must lie in (0, 1]".into());
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return bad("scales must be increasing".into());
        }
        if self.aspect_ratios.iter().any(|r| r.is_empty() || r.iter().any(|a| !(a.is_finite() && *a > 0.0))) {
            return bad("aspect ratios must be non-empty and positive".into());
        }
        Ok(())
    }

    pub fn priors_per_cell(&self, map: usize) -> usize {
        self.aspect_ratios[map].len()
    }

    pub fn prior_count(&self) -> usize {
        self.feature_map_sizes.iter().zip(&self.aspect_ratios).map(|(s, r)| s * s * r.len()).sum()
    }
}

/// Priors in map-major, row-major, ratio-minor order.
pub fn generate_priors(cfg: &PriorConfig) -> Result<Vec<PriorBox>, DetectorError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.prior_count());
    for (m, &size) in cfg.feature_map_sizes.iter().enumerate() {
        let scale = cfg.scales[m];
        for row in 0..size {
            for col in 0..size {
                let cx = (col as f64 + 0.5) / size as f64;
                let cy = (row as f64 + 0.5) / size as f64;
                for &ar in &cfg.aspect_ratios[m] {
                    let p = PriorBox { cx, cy, w: scale * ar.sqrt(), h: scale / ar.sqrt() };
                    out.push(if cfg.clip { PriorBox::from_corners(&p.corners().clip(&crate::geom::UNIT)) } else { p });
                }
            }
        }
    }
    Ok(out)
}
