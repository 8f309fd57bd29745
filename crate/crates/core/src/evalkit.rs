//! NMS, rescoring NMS, average precision and the refinement statistics.
//!
//! AP uses 101-point interpolation: precision is interpolated as the maximum
//! precision at any recall `>= r` and averaged over `r = 0, 0.01, ..., 1`.

use serde::{Deserialize, Serialize};

use crate::bucketing::{best_match, layout_from_box, side_centerlines, Side};
use crate::error::{check_len, Error, Result};
use crate::geometry::{iou, BBox};
use crate::head::rescore;

/// Label written into report headers so numbers can be reproduced.
pub const AP_METHOD: &str = "101-point interpolated AP, greedy score-descending matching";

/// Bins of proposal IoU used by the refinement statistics.
pub const IOU_BINS: [f64; 8] = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Bins used by the displacement statistics.
pub const DISPLACEMENT_BINS: [f64; 6] = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Default thresholds of the AP table.
pub const AP_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub loc_confidence: f64,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64, loc_confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) || !(0.0..=1.0).contains(&loc_confidence) {
            return Err(Error::InvalidArgument(format!(
                "score and loc_confidence must lie in [0, 1], got {score} and {loc_confidence}"
            )));
        }
        Ok(Self { bbox, score, loc_confidence })
    }
}

/// Indices sorted by descending score; equal scores keep index order.
fn ranked(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy NMS. Returns kept indices in the order they were selected.
pub fn nms(dets: &[Detection], iou_thr: f64) -> Vec<usize> {
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for i in ranked(dets) {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for (j, s) in suppressed.iter_mut().enumerate() {
            if !*s && j != i && iou(&dets[i].bbox, &dets[j].bbox) > iou_thr {
                *s = true;
            }
        }
    }
    keep
}

/// Copies of `dets` whose scores are multiplied by their localization
/// confidence.
pub fn rescored(dets: &[Detection]) -> Vec<Detection> {
    dets.iter().map(|d| Detection { score: rescore(d.score, d.loc_confidence), ..*d }).collect()
}

/// NMS on rescored detections. Returns kept indices and the kept detections
/// with their rescored scores.
pub fn rescoring_nms(dets: &[Detection], iou_thr: f64) -> (Vec<usize>, Vec<Detection>) {
    let r = rescored(dets);
    let keep = nms(&r, iou_thr);
    let kept = keep.iter().map(|&i| r[i]).collect();
    (keep, kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub iou_thr: f64,
    pub ap: f64,
    /// Precision and recall after each detection in ranked order.
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Matches detections to ground truth across all images and integrates the
/// precision-recall curve. With no ground truth the AP is 0.
pub fn pr_curve(dets: &[Vec<Detection>], gts: &[Vec<BBox>], iou_thr: f64) -> Result<ApResult> {
    check_len("images", gts.len(), dets.len())?;
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let mut all: Vec<(usize, usize)> = dets.iter().enumerate().flat_map(|(i, d)| (0..d.len()).map(move |j| (i, j))).collect();
    all.sort_by(|a, b| dets[b.0][b.1].score.total_cmp(&dets[a.0][a.1].score).then(a.cmp(b)));
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut precision = Vec::with_capacity(all.len());
    let mut recall = Vec::with_capacity(all.len());
    for (img, j) in all {
        let b = &dets[img][j].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts[img].iter().enumerate() {
            if matched[img][g] {
                continue;
            }
            let v = iou(b, gt);
            if v >= iou_thr && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                matched[img][g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 });
    }
    let ap = if n_gt == 0 { 0.0 } else { interpolated_ap(&precision, &recall) };
    Ok(ApResult { iou_thr, ap, precision, recall })
}

fn interpolated_ap(precision: &[f64], recall: &[f64]) -> f64 {
    // running max from the right gives the interpolated precision
    let mut env = precision.to_vec();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut sum = 0.0;
    let mut at = 0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        while at < recall.len() && recall[at] < r - 1e-12 {
            at += 1;
        }
        if at < env.len() {
            sum += env[at];
        }
    }
    sum / 101.0
}

pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<BBox>], iou_thr: f64) -> Result<f64> {
    Ok(pr_curve(dets, gts, iou_thr)?.ap)
}

/// Proposals of one image, their refined boxes and the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedImage {
    pub proposals: Vec<BBox>,
    pub refined: Vec<BBox>,
    pub gts: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Absent for empty bins.
    pub before: Option<f64>,
    pub after: Option<f64>,
}

/// Index of the `[lo, hi)` bin holding `v`; the last bin is closed.
fn bin_of(v: f64, edges: &[f64]) -> Option<usize> {
    let n = edges.len().checked_sub(1)?;
    (0..n).find(|&b| v >= edges[b] && (v < edges[b + 1] || (b + 1 == n && v <= edges[n])))
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument(format!("bin edges must be strictly ascending, got {edges:?}")));
    }
    Ok(())
}

/// Mean IoU before and after refinement, binned by the proposal's IoU with
/// its max-IoU ground truth. The same ground truth scores the refined box.
pub fn iou_improvement_stats(images: &[RefinedImage], edges: &[f64]) -> Result<Vec<IouBin>> {
    check_edges(edges)?;
    let n = edges.len() - 1;
    let mut sums = vec![(0usize, 0.0, 0.0); n];
    for img in images {
        check_len("refined boxes", img.proposals.len(), img.refined.len())?;
        for (p, r) in img.proposals.iter().zip(&img.refined) {
            let Some((g, before)) = best_match(p, &img.gts) else { continue };
            let Some(b) = bin_of(before, edges) else { continue };
            sums[b].0 += 1;
            sums[b].1 += before;
            sums[b].2 += iou(r, &img.gts[g]);
        }
    }
    Ok(sums
        .iter()
        .enumerate()
        .map(|(b, &(count, s0, s1))| IouBin {
            lo: edges[b],
            hi: edges[b + 1],
            count,
            before: (count > 0).then(|| s0 / count as f64),
            after: (count > 0).then(|| s1 / count as f64),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositiveCount {
    pub threshold: f64,
    pub mean_per_image: f64,
}

/// Mean number of refined boxes per image whose best IoU with any ground
/// truth reaches each threshold.
pub fn positive_count_stats(images: &[RefinedImage], thresholds: &[f64]) -> Result<Vec<PositiveCount>> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("thresholds must be ascending".into()));
    }
    let best: Vec<Vec<f64>> = images
        .iter()
        .map(|img| img.refined.iter().map(|r| best_match(r, &img.gts).map_or(0.0, |(_, v)| v)).collect())
        .collect();
    let n_img = images.len().max(1) as f64;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let total: usize = best.iter().map(|v| v.iter().filter(|x| **x >= t).count()).sum();
            PositiveCount { threshold: t, mean_per_image: total as f64 / n_img }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub raw_mean: Option<f64>,
    pub raw_var: Option<f64>,
    pub bucket_mean: Option<f64>,
    pub bucket_var: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementReport {
    pub sigma: f64,
    pub k: usize,
    pub bins: Vec<DisplacementBin>,
    /// Pairs whose left boundary lies outside the left side's buckets; they
    /// have no nearest bucket and are left out of both statistics.
    pub out_of_range: usize,
    /// Pairs whose proposal IoU falls outside every bin.
    pub unbinned: usize,
    /// Residuals exceeding half a bucket width (expected 0).
    pub bound_violations: usize,
    pub note: String,
}

/// Population mean and variance (two-pass).
fn moments(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var))
}

/// Left-boundary displacement statistics for matched `(proposal, gt)` pairs.
///
/// Raw displacement is `(gt.x1 - proposal.x1) / gt_width`. The bucketed
/// residual is `(gt.x1 - c) / gt_width` where `c` is the nearest left-side
/// bucket centerline of the `(sigma, k)` layout.
pub fn displacement_stats(pairs: &[(BBox, BBox)], sigma: f64, k: usize, edges: &[f64]) -> Result<DisplacementReport> {
    check_edges(edges)?;
    let n = edges.len() - 1;
    let mut raw = vec![Vec::new(); n];
    let mut bucketed = vec![Vec::new(); n];
    let (mut out_of_range, mut unbinned, mut bound_violations) = (0, 0, 0);
    for (p, g) in pairs {
        if !g.has_area() {
            return Err(Error::InvalidBox(g.x1, g.y1, g.x2, g.y2));
        }
        let Some(b) = bin_of(iou(p, g), edges) else {
            unbinned += 1;
            continue;
        };
        let (xl, _) = layout_from_box(p, sigma, k)?;
        let (lo, hi) = xl.side_span(Side::Left);
        if g.x1 < lo || g.x1 > hi {
            out_of_range += 1;
            continue;
        }
        let centers = side_centerlines(&xl, Side::Left)?;
        let mut best = centers[0];
        for &c in &centers[1..] {
            if (g.x1 - c).abs() < (g.x1 - best).abs() {
                best = c;
            }
        }
        let gw = g.width();
        let residual = (g.x1 - best) / gw;
        if residual.abs() > 0.5 * xl.bucket_width / gw * (1.0 + 1e-12) {
            bound_violations += 1;
        }
        raw[b].push((g.x1 - p.x1) / gw);
        bucketed[b].push(residual);
    }
    let bins = (0..n)
        .map(|b| {
            let r = moments(&raw[b]);
            let q = moments(&bucketed[b]);
            DisplacementBin {
                lo: edges[b],
                hi: edges[b + 1],
                count: raw[b].len(),
                raw_mean: r.map(|m| m.0),
                raw_var: r.map(|m| m.1),
                bucket_mean: q.map(|m| m.0),
                bucket_var: q.map(|m| m.1),
            }
        })
        .collect();
    Ok(DisplacementReport {
        sigma,
        k,
        bins,
        out_of_range,
        unbinned,
        bound_violations,
        note: "bucketed = residual to nearest left-side bucket centerline, divided by gt width".into(),
    })
}

/// `[lo;hi)`, or `[lo;hi]` for the closed last bin.
fn bin_label(lo: f64, hi: f64, last: bool) -> String {
    format!("[{lo};{hi}{}", if last { "]" } else { ")" })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Per-bin displacement moments; empty bins leave their cells blank. Bin
/// counts are in the JSON report.
pub fn displacement_csv(r: &DisplacementReport) -> String {
    let mut s = String::from("bin,raw_mean,raw_var,bucket_mean,bucket_var\n");
    for (i, b) in r.bins.iter().enumerate() {
        s += &format!(
            "{},{},{},{},{}\n",
            bin_label(b.lo, b.hi, i + 1 == r.bins.len()),
            opt(b.raw_mean),
            opt(b.raw_var),
            opt(b.bucket_mean),
            opt(b.bucket_var)
        );
    }
    s
}

pub fn iou_bins_csv(bins: &[IouBin]) -> String {
    let mut s = String::from("bin,count,iou_before,iou_after\n");
    for (i, b) in bins.iter().enumerate() {
        let label = bin_label(b.lo, b.hi, i + 1 == bins.len());
        s += &format!("{label},{},{},{}\n", b.count, opt(b.before), opt(b.after));
    }
    s
}

pub fn positive_count_csv(counts: &[PositiveCount]) -> String {
    let mut s = String::from("threshold,mean_per_image\n");
    for c in counts {
        s += &format!("{},{}\n", c.threshold, c.mean_per_image);
    }
    s
}
