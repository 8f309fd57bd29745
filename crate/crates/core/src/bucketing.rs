//! Bucket layouts, boundary target encoding and prediction decoding.
//!
//! A proposal is scaled about its center by `sigma`; the resulting candidate
//! region is cut into `2k` equal buckets on each axis. Buckets are indexed
//! globally `0..2k` in ascending coordinate order. The left (top) side owns
//! buckets `0..k` and the right (down) side owns buckets `k..2k`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::{iou, scale_about_center, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    Top,
    Down,
}

impl Side {
    /// Sides in the order used for every four-element side array in this crate.
    pub const ALL: [Side; 4] = [Side::Left, Side::Right, Side::Top, Side::Down];

    pub fn axis(self) -> Axis {
        match self {
            Side::Left | Side::Right => Axis::X,
            Side::Top | Side::Down => Axis::Y,
        }
    }

    /// True for the side that owns the lower half of the buckets.
    pub fn is_low(self) -> bool {
        matches!(self, Side::Left | Side::Top)
    }

    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
            Side::Top => 2,
            Side::Down => 3,
        }
    }

    /// The boundary coordinate of `b` that this side localizes.
    pub fn coord(self, b: &BBox) -> f64 {
        match self {
            Side::Left => b.x1,
            Side::Right => b.x2,
            Side::Top => b.y1,
            Side::Down => b.y2,
        }
    }
}

/// Bucket partition of one axis of a candidate region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisLayout {
    pub lo: f64,
    pub bucket_width: f64,
    pub k: usize,
    pub axis: Axis,
}

impl AxisLayout {
    pub fn new(lo: f64, bucket_width: f64, k: usize, axis: Axis) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
        }
        if !(bucket_width > 0.0) || !bucket_width.is_finite() || !lo.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "bucket width must be positive and finite, got {bucket_width}"
            )));
        }
        Ok(Self { lo, bucket_width, k, axis })
    }

    pub fn num_buckets(&self) -> usize {
        2 * self.k
    }

    pub fn hi(&self) -> f64 {
        self.lo + self.num_buckets() as f64 * self.bucket_width
    }

    /// Centerline of global bucket `i`.
    pub fn centerline(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.bucket_width
    }

    /// Global index of the first bucket owned by `side`.
    pub fn side_start(&self, side: Side) -> usize {
        if side.is_low() {
            0
        } else {
            self.k
        }
    }

    /// Closed coordinate span covered by the buckets of `side`.
    pub fn side_span(&self, side: Side) -> (f64, f64) {
        let start = self.side_start(side) as f64;
        (
            self.lo + start * self.bucket_width,
            self.lo + (start + self.k as f64) * self.bucket_width,
        )
    }

    fn check_side(&self, side: Side) -> Result<()> {
        if side.axis() == self.axis {
            Ok(())
        } else {
            Err(Error::AxisSideMismatch { side, axis: self.axis })
        }
    }
}

/// Builds the X and Y layouts of the `sigma`-scaled candidate region of `b`.
pub fn layout_from_box(b: &BBox, sigma: f64, k: usize) -> Result<(AxisLayout, AxisLayout)> {
    if !b.has_area() {
        return Err(Error::DegenerateProposal);
    }
    if !(sigma >= 1.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be >= 1, got {sigma}")));
    }
    let region = scale_about_center(b, sigma)?;
    let n = (2 * k) as f64;
    let x = AxisLayout::new(region.x1, sigma * b.width() / n, k, Axis::X)?;
    let y = AxisLayout::new(region.y1, sigma * b.height() / n, k, Axis::Y)?;
    Ok((x, y))
}

/// Centerlines of the `k` buckets owned by `side`, ascending.
pub fn side_centerlines(layout: &AxisLayout, side: Side) -> Result<Vec<f64>> {
    layout.check_side(side)?;
    let start = layout.side_start(side);
    Ok((start..start + layout.k).map(|i| layout.centerline(i)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BucketLabel {
    Positive,
    Negative,
    Ignore,
}

/// Switches for the two target-design choices: ignoring the second-nearest
/// bucket in the bucketing loss, and regressing the top-2 buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetDesign {
    pub use_ignore: bool,
    pub use_top2: bool,
}

impl Default for TargetDesign {
    fn default() -> Self {
        Self { use_ignore: true, use_top2: true }
    }
}

/// Training targets for one side. Indices are local to the side (`0..k`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideTargets {
    pub labels: Vec<BucketLabel>,
    pub offsets: Vec<f64>,
    pub offset_valid: Vec<bool>,
    pub in_range: bool,
}

impl SideTargets {
    fn out_of_range(k: usize) -> Self {
        Self {
            labels: vec![BucketLabel::Negative; k],
            offsets: vec![0.0; k],
            offset_valid: vec![false; k],
            in_range: false,
        }
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    /// Local index of the positive bucket, if any.
    pub fn positive(&self) -> Option<usize> {
        self.labels.iter().position(|l| *l == BucketLabel::Positive)
    }
}

/// Nearest and second-nearest local bucket indices; ties go to the lower index.
fn two_nearest(centers: &[f64], gt: f64) -> (usize, usize) {
    let mut best = (usize::MAX, f64::INFINITY);
    let mut second = (usize::MAX, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = (gt - c).abs();
        if d < best.1 {
            second = best;
            best = (i, d);
        } else if d < second.1 {
            second = (i, d);
        }
    }
    (best.0, second.0)
}

/// Encodes one ground-truth boundary against the buckets of `side`.
///
/// When the boundary falls outside the span of the side's buckets the side is
/// flagged `in_range = false` and carries only negative labels and no valid
/// offsets.
pub fn encode_side(layout: &AxisLayout, side: Side, gt_boundary: f64, design: TargetDesign) -> Result<SideTargets> {
    let centers = side_centerlines(layout, side)?;
    let k = layout.k;
    let (a, b) = layout.side_span(side);
    if !(gt_boundary >= a && gt_boundary <= b) {
        return Ok(SideTargets::out_of_range(k));
    }

    let (nearest, second) = two_nearest(&centers, gt_boundary);
    let mut t = SideTargets::out_of_range(k);
    t.in_range = true;
    t.labels[nearest] = BucketLabel::Positive;
    if design.use_ignore {
        t.labels[second] = BucketLabel::Ignore;
    }
    let w = layout.bucket_width;
    t.offsets[nearest] = (gt_boundary - centers[nearest]) / w;
    t.offset_valid[nearest] = true;
    if design.use_top2 {
        t.offsets[second] = (gt_boundary - centers[second]) / w;
        t.offset_valid[second] = true;
    }
    Ok(t)
}

/// Targets for all four sides of a proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxTargets {
    pub left: SideTargets,
    pub right: SideTargets,
    pub top: SideTargets,
    pub down: SideTargets,
    pub x_layout: AxisLayout,
    pub y_layout: AxisLayout,
}

impl BoxTargets {
    pub fn side(&self, side: Side) -> &SideTargets {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
            Side::Top => &self.top,
            Side::Down => &self.down,
        }
    }

    pub fn layout(&self, axis: Axis) -> &AxisLayout {
        match axis {
            Axis::X => &self.x_layout,
            Axis::Y => &self.y_layout,
        }
    }

    pub fn all_in_range(&self) -> bool {
        Side::ALL.iter().all(|s| self.side(*s).in_range)
    }

    pub fn layouts(&self) -> (AxisLayout, AxisLayout) {
        (self.x_layout, self.y_layout)
    }
}

pub fn encode_box(proposal: &BBox, gt: &BBox, sigma: f64, k: usize, design: TargetDesign) -> Result<BoxTargets> {
    if !gt.has_area() {
        return Err(Error::InvalidArgument("ground-truth box has zero area".into()));
    }
    let (xl, yl) = layout_from_box(proposal, sigma, k)?;
    Ok(BoxTargets {
        left: encode_side(&xl, Side::Left, gt.x1, design)?,
        right: encode_side(&xl, Side::Right, gt.x2, design)?,
        top: encode_side(&yl, Side::Top, gt.y1, design)?,
        down: encode_side(&yl, Side::Down, gt.y2, design)?,
        x_layout: xl,
        y_layout: yl,
    })
}

/// Per-side model output: bucket confidences (probabilities) and per-bucket
/// offsets in bucket-width units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidePrediction {
    pub confidences: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl SidePrediction {
    pub fn new(confidences: Vec<f64>, offsets: Vec<f64>) -> Result<Self> {
        check_len("side prediction offsets", confidences.len(), offsets.len())?;
        Ok(Self { confidences, offsets })
    }

    /// Prediction that reproduces `t` exactly: one-hot on the positive bucket
    /// with the target offsets.
    pub fn from_targets(t: &SideTargets) -> Self {
        let confidences = t
            .labels
            .iter()
            .map(|l| if *l == BucketLabel::Positive { 1.0 } else { 0.0 })
            .collect();
        Self { confidences, offsets: t.offsets.clone() }
    }
}

/// Raw head output for one side: per-bucket classification logits and
/// per-bucket offsets (bucket-width units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSide {
    pub logits: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl RawSide {
    pub fn zeros(k: usize) -> Self {
        Self { logits: vec![0.0; k], offsets: vec![0.0; k] }
    }

    /// Applies the per-bucket sigmoid.
    pub fn to_prediction(&self) -> SidePrediction {
        SidePrediction {
            confidences: self.logits.iter().map(|l| sigmoid(*l)).collect(),
            offsets: self.offsets.clone(),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the maximum value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Decodes one side: centerline of the most confident bucket plus its offset.
/// Returns the boundary and the winning confidence.
pub fn decode_side(pred: &SidePrediction, layout: &AxisLayout, side: Side) -> Result<(f64, f64)> {
    if pred.confidences.is_empty() {
        return Err(Error::EmptyPrediction);
    }
    check_len("side prediction confidences", layout.k, pred.confidences.len())?;
    check_len("side prediction offsets", layout.k, pred.offsets.len())?;
    layout.check_side(side)?;
    let j = argmax(&pred.confidences).ok_or(Error::EmptyPrediction)?;
    let c = layout.centerline(layout.side_start(side) + j);
    Ok((c + pred.offsets[j] * layout.bucket_width, pred.confidences[j]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodedBox {
    pub bbox: BBox,
    /// Mean of the four winning bucket confidences.
    pub loc_confidence: f64,
    /// Set when decoded boundaries crossed and had to be swapped.
    pub degenerate: bool,
}

/// Decodes four side predictions (ordered as [`Side::ALL`]) into a box.
pub fn decode_box(preds: &[SidePrediction; 4], x_layout: &AxisLayout, y_layout: &AxisLayout) -> Result<DecodedBox> {
    let mut bounds = [0.0; 4];
    let mut conf = 0.0;
    for side in Side::ALL {
        let layout = if side.axis() == Axis::X { x_layout } else { y_layout };
        let (b, c) = decode_side(&preds[side.index()], layout, side)?;
        bounds[side.index()] = b;
        conf += c;
    }
    let [mut x1, mut x2, mut y1, mut y2] = bounds;
    let mut degenerate = false;
    if x1 > x2 {
        std::mem::swap(&mut x1, &mut x2);
        degenerate = true;
    }
    if y1 > y2 {
        std::mem::swap(&mut y1, &mut y2);
        degenerate = true;
    }
    let bbox = BBox::new(x1, y1, x2, y2)?;
    Ok(DecodedBox { bbox, loc_confidence: conf / 4.0, degenerate })
}

/// Square anchor of side `gamma * stride` centered at `(cx, cy)`.
pub fn make_anchor(cx: f64, cy: f64, stride: f64, gamma: f64) -> Result<BBox> {
    if !(stride > 0.0) || !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "stride and gamma must be positive, got {stride} and {gamma}"
        )));
    }
    let s = gamma * stride;
    Ok(BBox::from_center(cx, cy, s, s))
}

/// One anchor per feature-map cell of a `width x height` image, centered on
/// the cell centers, in row-major order.
pub fn anchor_grid(width: f64, height: f64, stride: f64, gamma: f64) -> Result<Vec<BBox>> {
    if !(stride > 0.0) {
        return Err(Error::InvalidArgument(format!("stride must be positive, got {stride}")));
    }
    let nx = (width / stride).floor() as usize;
    let ny = (height / stride).floor() as usize;
    let mut out = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            let cx = (ix as f64 + 0.5) * stride;
            let cy = (iy as f64 + 0.5) * stride;
            out.push(make_anchor(cx, cy, stride, gamma)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Assignment {
    Matched(usize),
    Background,
    Ignored,
}

impl Assignment {
    pub fn matched(self) -> Option<usize> {
        match self {
            Assignment::Matched(i) => Some(i),
            _ => None,
        }
    }
}

/// Index and IoU of the best-overlapping gt; ties go to the lower index.
pub fn best_match(b: &BBox, gts: &[BBox]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in gts.iter().enumerate() {
        let v = iou(b, g);
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best
}

/// Max-IoU assignment with a positive threshold and a background threshold;
/// proposals in between are ignored.
pub fn assign_proposals(proposals: &[BBox], gts: &[BBox], pos_iou: f64, neg_iou: f64) -> Result<Vec<Assignment>> {
    if !(0.0..=1.0).contains(&neg_iou) || !(0.0..=1.0).contains(&pos_iou) || neg_iou > pos_iou {
        return Err(Error::InvalidArgument(format!(
            "thresholds must satisfy 0 <= neg ({neg_iou}) <= pos ({pos_iou}) <= 1"
        )));
    }
    Ok(proposals
        .iter()
        .map(|p| match best_match(p, gts) {
            Some((i, v)) if v >= pos_iou => Assignment::Matched(i),
            Some((_, v)) if v >= neg_iou => Assignment::Ignored,
            _ => Assignment::Background,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn x_layout() -> AxisLayout {
        AxisLayout::new(0.0, 2.5, 2, Axis::X).unwrap()
    }

    #[test]
    fn layout_examples() {
        let (x, _) = layout_from_box(&bx(0., 0., 10., 10.), 1.0, 2).unwrap();
        assert_eq!((x.lo, x.bucket_width), (0.0, 2.5));
        let all: Vec<f64> = (0..4).map(|i| x.centerline(i)).collect();
        assert_eq!(all, vec![1.25, 3.75, 6.25, 8.75]);

        let (x, _) = layout_from_box(&bx(2., 0., 8., 10.), 1.5, 2).unwrap();
        assert_eq!(x.lo, 0.5);
        assert!((x.bucket_width - 2.25).abs() < 1e-15);

        let (x, y) = layout_from_box(&bx(0., 0., 30., 40.), 1.7, 7).unwrap();
        assert_eq!(x.num_buckets(), 14);
        assert_eq!(y.num_buckets(), 14);
    }

    #[test]
    fn layout_rejects_bad_input() {
        assert!(matches!(layout_from_box(&bx(0., 0., 0., 5.), 1.7, 7), Err(Error::DegenerateProposal)));
        assert!(layout_from_box(&bx(0., 0., 5., 5.), 1.7, 1).is_err());
        assert!(layout_from_box(&bx(0., 0., 5., 5.), 0.9, 7).is_err());
    }

    #[test]
    fn centerlines_per_side() {
        let l = x_layout();
        assert_eq!(side_centerlines(&l, Side::Left).unwrap(), vec![1.25, 3.75]);
        assert_eq!(side_centerlines(&l, Side::Right).unwrap(), vec![6.25, 8.75]);
        assert!(side_centerlines(&l, Side::Top).is_err());
        assert!(AxisLayout::new(0.0, 1.0, 1, Axis::X).is_err());
    }

    #[test]
    fn encode_side_examples() {
        let l = x_layout();
        let t = encode_side(&l, Side::Left, 2.0, TargetDesign::default()).unwrap();
        assert_eq!(t.labels, vec![BucketLabel::Positive, BucketLabel::Ignore]);
        assert!((t.offsets[0] - 0.3).abs() < 1e-15);
        assert!((t.offsets[1] + 0.7).abs() < 1e-15);
        assert_eq!(t.offset_valid, vec![true, true]);

        let t = encode_side(&l, Side::Left, 1.25, TargetDesign::default()).unwrap();
        assert_eq!(t.offsets[0], 0.0);

        // equidistant from 1.25 and 3.75
        let t = encode_side(&l, Side::Left, 2.5, TargetDesign::default()).unwrap();
        assert_eq!(t.positive(), Some(0));
        assert_eq!(t.labels[1], BucketLabel::Ignore);
    }

    #[test]
    fn encode_side_design_flags() {
        let l = x_layout();
        let plain = TargetDesign { use_ignore: false, use_top2: false };
        let t = encode_side(&l, Side::Left, 2.0, plain).unwrap();
        assert_eq!(t.labels, vec![BucketLabel::Positive, BucketLabel::Negative]);
        assert_eq!(t.offset_valid, vec![true, false]);
        assert_eq!(t.offsets[1], 0.0);
    }

    #[test]
    fn encode_side_out_of_range() {
        let l = x_layout();
        let t = encode_side(&l, Side::Left, -3.0, TargetDesign::default()).unwrap();
        assert!(!t.in_range);
        assert!(t.labels.iter().all(|l| *l == BucketLabel::Negative));
        assert!(t.offset_valid.iter().all(|v| !v));
        // the left side's buckets stop at the region center
        assert!(!encode_side(&l, Side::Left, 6.0, TargetDesign::default()).unwrap().in_range);
        assert!(encode_side(&l, Side::Right, 6.0, TargetDesign::default()).unwrap().in_range);
    }

    #[test]
    fn encode_box_identity_proposal() {
        let b = bx(0., 0., 10., 10.);
        let t = encode_box(&b, &b, 1.0, 2, TargetDesign::default()).unwrap();
        assert_eq!(t.left.positive(), Some(0));
        assert!((t.left.offsets[0] + 0.5).abs() < 1e-15);
        assert_eq!(t.right.positive(), Some(1));
        assert!((t.right.offsets[1] - 0.5).abs() < 1e-15);
        assert!(t.all_in_range());
    }

    #[test]
    fn encode_box_far_gt() {
        let t = encode_box(&bx(0., 0., 10., 10.), &bx(50., 0., 60., 10.), 1.7, 7, TargetDesign::default()).unwrap();
        assert!(!t.left.in_range);
        assert!(!t.right.in_range);
        assert!(t.top.in_range && t.down.in_range);
    }

    #[test]
    fn encode_box_degenerate() {
        let r = encode_box(&bx(0., 0., 0., 10.), &bx(0., 0., 5., 5.), 1.7, 7, TargetDesign::default());
        assert!(matches!(r, Err(Error::DegenerateProposal)));
    }

    #[test]
    fn decode_side_examples() {
        let l = x_layout();
        let p = SidePrediction::new(vec![1.0, 0.0], vec![0.3, 0.0]).unwrap();
        let (b, c) = decode_side(&p, &l, Side::Left).unwrap();
        assert!((b - 2.0).abs() < 1e-15);
        assert_eq!(c, 1.0);

        let p = SidePrediction::new(vec![0.1, 0.7], vec![0.0, 0.0]).unwrap();
        assert_eq!(decode_side(&p, &l, Side::Right).unwrap(), (8.75, 0.7));

        let p = SidePrediction::new(vec![0.4, 0.4], vec![0.0, 0.0]).unwrap();
        assert_eq!(decode_side(&p, &l, Side::Left).unwrap().0, 1.25);

        let empty = SidePrediction { confidences: vec![], offsets: vec![] };
        assert!(matches!(decode_side(&empty, &l, Side::Left), Err(Error::EmptyPrediction)));
    }

    #[test]
    fn decode_box_confidence_and_swap() {
        let (xl, yl) = layout_from_box(&bx(0., 0., 10., 10.), 1.0, 2).unwrap();
        let side = |c: f64, j: usize| {
            let mut conf = vec![0.0, 0.0];
            conf[j] = c;
            SidePrediction::new(conf, vec![0.0, 0.0]).unwrap()
        };
        let preds = [side(0.6, 0), side(0.8, 1), side(0.7, 0), side(0.9, 1)];
        let d = decode_box(&preds, &xl, &yl).unwrap();
        assert!((d.loc_confidence - 0.75).abs() < 1e-15);
        assert_eq!(d.bbox, bx(1.25, 1.25, 8.75, 8.75));
        assert!(!d.degenerate);

        // left decodes to 3.75 + 3 * 2.5, past the right boundary
        let mut preds = preds;
        preds[0] = SidePrediction::new(vec![0.0, 1.0], vec![0.0, 3.0]).unwrap();
        let d = decode_box(&preds, &xl, &yl).unwrap();
        assert!(d.degenerate);
        assert_eq!((d.bbox.x1, d.bbox.x2), (8.75, 11.25));
    }

    #[test]
    fn roundtrip_exact() {
        let p = bx(10., 20., 50., 70.);
        let g = bx(12., 18., 47., 75.);
        let t = encode_box(&p, &g, 1.7, 7, TargetDesign::default()).unwrap();
        let preds = Side::ALL.map(|s| SidePrediction::from_targets(t.side(s)));
        let d = decode_box(&preds, &t.x_layout, &t.y_layout).unwrap();
        for (a, b) in d.bbox.to_array().iter().zip(g.to_array()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(d.loc_confidence, 1.0);
    }

    #[test]
    fn anchors() {
        assert_eq!(make_anchor(100., 100., 8., 8.).unwrap(), bx(68., 68., 132., 132.));
        assert_eq!(make_anchor(3., 4., 1., 1.).unwrap(), bx(2.5, 3.5, 3.5, 4.5));
        assert_eq!(anchor_grid(32., 32., 8., 8.).unwrap().len(), 16);
        assert!(make_anchor(0., 0., 0., 8.).is_err());
    }

    #[test]
    fn assignment_bands() {
        let g = bx(0., 0., 10., 10.);
        assert_eq!(assign_proposals(&[g], &[g], 0.5, 0.5).unwrap(), vec![Assignment::Matched(0)]);
        // IoU 0.3: 10x10 gt vs box sharing a 10 x h strip
        let low = bx(0., 0., 10., 3.);
        assert!((iou(&low, &g) - 0.3).abs() < 1e-12);
        assert_eq!(assign_proposals(&[low], &[g], 0.5, 0.4).unwrap(), vec![Assignment::Background]);
        let mid = bx(0., 0., 10., 4.5);
        assert!((iou(&mid, &g) - 0.45).abs() < 1e-12);
        assert_eq!(assign_proposals(&[mid], &[g], 0.5, 0.4).unwrap(), vec![Assignment::Ignored]);
        assert!(assign_proposals(&[g], &[g], 0.4, 0.5).is_err());
        assert_eq!(assign_proposals(&[g], &[], 0.5, 0.4).unwrap(), vec![Assignment::Background]);
    }

    #[test]
    fn assignment_tie_goes_to_lower_index() {
        let g = bx(0., 0., 10., 10.);
        assert_eq!(assign_proposals(&[g], &[g, g], 0.5, 0.4).unwrap(), vec![Assignment::Matched(0)]);
    }

    #[test]
    fn targets_json_shape() {
        let t = encode_side(&x_layout(), Side::Left, 2.0, TargetDesign::default()).unwrap();
        let v = serde_json::to_value(&t).unwrap();
        assert_eq!(v["labels"][0], "POSITIVE");
        assert_eq!(v["labels"][1], "IGNORE");
    }
}
