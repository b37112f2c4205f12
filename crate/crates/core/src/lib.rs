//! Extratropical cyclone detection pipeline.
//!
//! The crate covers every stage between raw reanalysis fields and a scored detector:
//!
//! 1. [`grid`] loads and renders global lat-lon fields and provides great-circle distances.
//! 2. [`cyclone_track`] finds sea-level-pressure minima and links them into tracks.
//! 3. [`labelstore`] keeps stage-classed boxes, runs the two-expert review and exports datasets.
//! 4. [`augment`] prepares (image, boxes) samples for training.
//! 5. [`detector`] is a small single-shot multibox detector with hand-written gradients.
//! 6. [`eval`] computes precision-recall curves, AP and mAP.
//! 7. [`synth`] produces deterministic stand-in data for all of the above.

pub mod augment;
pub mod config;
pub mod cyclone_track;
pub mod detector;
pub mod eval;
pub mod fsio;
pub mod geom;
pub mod grid;
pub mod labelstore;
pub mod raster;
pub mod project;
pub mod synth;

pub use geom::{BoundingBox, Rect};
pub use labelstore::StageClass;
