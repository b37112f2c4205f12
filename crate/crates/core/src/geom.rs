//! Axis-aligned rectangles.
//!
//! [`Rect`] is an unconstrained corner-form rectangle used for pixel-space boxes, decoded
//! predictions and IoU arithmetic. [`BoundingBox`] is the validated normalized form stored in
//! annotations and datasets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoxError {
    #[error("box coordinate {0} is not finite")]
    NonFinite(&'static str),
    #[error("degenerate box: xmin {xmin} >= xmax {xmax}")]
    DegenerateX { xmin: f64, xmax: f64 },
    #[error("degenerate box: ymin {ymin} >= ymax {ymax}")]
    DegenerateY { ymin: f64, ymax: f64 },
    #[error("box coordinate {name} = {value} outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
}

/// Corner-form rectangle without range constraints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl Rect {
    pub const fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Self { xmin, ymin, xmax, ymax }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0)
    }

    /// Area, zero for inverted rectangles.
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = self.xmax.min(other.xmax) - self.xmin.max(other.xmin);
        let h = self.ymax.min(other.ymax) - self.ymin.max(other.ymin);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union. Two empty rectangles have IoU 0.
    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    pub fn clip(&self, bounds: &Rect) -> Rect {
        Rect::new(
            self.xmin.clamp(bounds.xmin, bounds.xmax),
            self.ymin.clamp(bounds.ymin, bounds.ymax),
            self.xmax.clamp(bounds.xmin, bounds.xmax),
            self.ymax.clamp(bounds.ymin, bounds.ymax),
        )
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x > self.xmin && x < self.xmax && y > self.ymin && y < self.ymax
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Rect {
        Rect::new(self.xmin * sx, self.ymin * sy, self.xmax * sx, self.ymax * sy)
    }
}

pub const UNIT: Rect = Rect::new(0.0, 0.0, 1.0, 1.0);

/// A box in normalized image coordinates: `0 <= min < max <= 1` on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Rect", into = "Rect")]
pub struct BoundingBox(Rect);

impl BoundingBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self, BoxError> {
        Self::try_from(Rect::new(xmin, ymin, xmax, ymax))
    }

    /// Clamps into the unit square first. Fails only if the result is degenerate.
    pub fn clamped(rect: Rect) -> Result<Self, BoxError> {
        Self::try_from(rect.clip(&UNIT))
    }

    pub fn xmin(&self) -> f64 {
        self.0.xmin
    }
    pub fn ymin(&self) -> f64 {
        self.0.ymin
    }
    pub fn xmax(&self) -> f64 {
        self.0.xmax
    }
    pub fn ymax(&self) -> f64 {
        self.0.ymax
    }

    pub fn rect(&self) -> Rect {
        self.0
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        self.0.iou(&other.0)
    }
}

impl TryFrom<Rect> for BoundingBox {
    type Error = BoxError;

    fn try_from(r: Rect) -> Result<Self, BoxError> {
        for (name, value) in [("xmin", r.xmin), ("ymin", r.ymin), ("xmax", r.xmax), ("ymax", r.ymax)] {
            if !value.is_finite() {
                return Err(BoxError::NonFinite(name));
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(BoxError::OutOfRange { name, value });
            }
        }
        if r.xmin >= r.xmax {
            return Err(BoxError::DegenerateX { xmin: r.xmin, xmax: r.xmax });
        }
        if r.ymin >= r.ymax {
            return Err(BoxError::DegenerateY { ymin: r.ymin, ymax: r.ymax });
        }
        Ok(Self(r))
    }
}

impl From<BoundingBox> for Rect {
    fn from(b: BoundingBox) -> Rect {
        b.0
    }
}
