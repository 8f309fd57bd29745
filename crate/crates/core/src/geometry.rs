//! Axis-aligned box primitives.
//!
//! Coordinates are continuous: `(x1, y1)` is the top-left corner and
//! `(x2, y2)` the bottom-right, with `width = x2 - x1` (no `+1`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in image coordinates.
///
/// Serialized as a JSON array `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite or inverted coordinates.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 > x2 || y1 > y2 {
            return Err(Error::InvalidBox(x1, y1, x2, y2));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Box of size `w` x `h` centered at `(cx, cy)`.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// True when both extents are strictly positive.
    pub fn has_area(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn is_valid(&self) -> bool {
        Self::new(self.x1, self.y1, self.x2, self.y2).is_ok()
    }

    /// Scales every coordinate by `c` (used for scale-invariance checks).
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            x1: self.x1 * c,
            y1: self.y1 * c,
            x2: self.x2 * c,
            y2: self.y2 * c,
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// A box with a class id (0 = background, 1 = object) and a score in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub class_id: u32,
    pub score: f64,
}

impl LabeledBox {
    pub fn new(bbox: BBox, class_id: u32, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidArgument(format!("score {score} outside [0, 1]")));
        }
        Ok(Self { bbox, class_id, score })
    }
}

/// Intersection over union. Zero-area boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Scales width and height by `sigma`, keeping the center fixed.
pub fn scale_about_center(b: &BBox, sigma: f64) -> Result<BBox> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("scale factor must be positive, got {sigma}")));
    }
    // grow each side by half the added extent; exact at sigma = 1
    let gx = 0.5 * (sigma - 1.0) * b.width();
    let gy = 0.5 * (sigma - 1.0) * b.height();
    Ok(BBox {
        x1: b.x1 - gx,
        y1: b.y1 - gy,
        x2: b.x2 + gx,
        y2: b.y2 + gy,
    })
}

/// Clamps coordinates into `[0, w] x [0, h]`.
pub fn clip_to_image(b: &BBox, w: f64, h: f64) -> BBox {
    BBox {
        x1: b.x1.clamp(0.0, w),
        y1: b.y1.clamp(0.0, h),
        x2: b.x2.clamp(0.0, w),
        y2: b.y2.clamp(0.0, h),
    }
}
