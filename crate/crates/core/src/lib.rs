//! Side-aware boundary localization toolkit.
//!
//! Each side of a box is localized separately: the `sigma`-scaled region
//! around a proposal is cut into `2k` buckets per axis, a classifier picks the
//! bucket whose centerline is nearest the boundary, and a regressor refines
//! the offset from that centerline. The averaged bucket confidence is also
//! used to rescore detections before NMS.
//!
//! Modules, bottom-up:
//!
//! - [`geometry`]: boxes, IoU, scaling and clipping.
//! - [`bucketing`]: bucket layouts, target encoding, decoding, anchors,
//!   proposal assignment.
//! - [`ndmath`]: the small array kernels (attention, 1-D conv, deconv,
//!   dense) with backward passes and a finite-difference oracle.
//! - [`losses`]: BCE, Smooth L1 and the composite objective.
//! - [`head`]: the side-aware head, the two regression baselines, rescoring
//!   and SGD.
//! - [`evalkit`]: NMS, rescoring NMS, AP and the displacement / IoU
//!   statistics.
//! - [`synthbench`]: synthetic scenes, RoI features, training and the
//!   variant comparison report.

pub mod bucketing;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod gradsuite;
pub mod head;
pub mod losses;
pub mod ndmath;
pub mod synthbench;

pub use error::{Error, Result};
pub use geometry::BBox;
