//! Post-processing for ant detection: turns detector output into validated
//! counts and foraging analytics.
//!
//! - [`geometry`]: boxes, IoU, YOLO normalization, box-to-circle conversion.
//! - [`annotation`]: label/detection text files, size manifests, dataset indexing.
//! - [`tiling`]: patch grids, ground-truth slicing, tile-to-image remapping, merging.
//! - [`detector`]: replay, synthetic and external detection backends plus
//!   the sliced detection pipeline.
//! - [`evaluation`]: precision/recall matching, count agreement, subset sampling.
//! - [`heatmap`]: Gaussian activity grids and their rendering.
//! - [`analytics`]: bait-side splitting and count time series.

pub mod analytics;
pub mod annotation;
pub mod detector;
pub mod evaluation;
pub mod geometry;
pub mod heatmap;
pub mod tiling;

pub use geometry::{iou, ImageSize, NormBox, PixelBox};
