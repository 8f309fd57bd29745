//! Bucketing BCE, fine-regression Smooth L1 and the composite objective.
//!
//! Batch losses are means over the contributing elements of the whole batch.
//! An empty reduction is defined as 0 with count 0. Gradients are returned
//! already divided by that count.

use serde::{Deserialize, Serialize};

use crate::bucketing::{sigmoid, BoxTargets, BucketLabel, RawSide, Side};
use crate::error::{check_len, Error, Result};

/// Numerically stable binary cross-entropy on a logit, for any label in
/// `[0, 1]`. Returns `(loss, d loss / d logit)`.
pub fn bce_with_logits(logit: f64, label: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - label)
}

/// Smooth L1 on `d = pred - target`: `0.5 d^2 / beta` inside `|d| < beta`,
/// `|d| - 0.5 beta` outside. Returns `(loss, d loss / d pred)`.
pub fn smooth_l1(pred: f64, target: f64, beta: f64) -> (f64, f64) {
    let d = pred - target;
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

/// A mean over `count` elements.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Reduced {
    pub value: f64,
    pub count: usize,
}

impl Reduced {
    fn from_sum(sum: f64, count: usize) -> Self {
        if count == 0 {
            Self { value: 0.0, count: 0 }
        } else {
            Self { value: sum / count as f64, count }
        }
    }
}

fn check_batch(targets: &[BoxTargets], raw: &[[RawSide; 4]]) -> Result<()> {
    check_len("loss batch", targets.len(), raw.len())?;
    for (t, r) in targets.iter().zip(raw) {
        for side in Side::ALL {
            let k = t.side(side).k();
            let rs = &r[side.index()];
            check_len("side logits", k, rs.logits.len())?;
            check_len("side offsets", k, rs.offsets.len())?;
        }
    }
    Ok(())
}

fn zero_grads(raw: &[[RawSide; 4]]) -> Vec<[Vec<f64>; 4]> {
    raw.iter().map(|r| r.each_ref().map(|s| vec![0.0; s.logits.len()])).collect()
}

/// Mean BCE over every non-ignored bucket of every in-range side.
/// Gradients are w.r.t. the bucket logits.
pub fn bucketing_loss(targets: &[BoxTargets], raw: &[[RawSide; 4]]) -> Result<(Reduced, Vec<[Vec<f64>; 4]>)> {
    check_batch(targets, raw)?;
    let mut grads = zero_grads(raw);
    let mut sum = 0.0;
    let mut count = 0;
    for ((t, r), g) in targets.iter().zip(raw).zip(grads.iter_mut()) {
        for side in Side::ALL {
            let st = t.side(side);
            if !st.in_range {
                continue;
            }
            for (j, label) in st.labels.iter().enumerate() {
                let y = match label {
                    BucketLabel::Positive => 1.0,
                    BucketLabel::Negative => 0.0,
                    BucketLabel::Ignore => continue,
                };
                let (l, d) = bce_with_logits(r[side.index()].logits[j], y);
                sum += l;
                g[side.index()][j] = d;
                count += 1;
            }
        }
    }
    scale_grads(&mut grads, count);
    Ok((Reduced::from_sum(sum, count), grads))
}

/// Mean Smooth L1 over every valid offset slot. Gradients are w.r.t. the
/// predicted offsets and are zero on every other slot.
pub fn regression_loss(targets: &[BoxTargets], raw: &[[RawSide; 4]], beta: f64) -> Result<(Reduced, Vec<[Vec<f64>; 4]>)> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    check_batch(targets, raw)?;
    let mut grads = zero_grads(raw);
    let mut sum = 0.0;
    let mut count = 0;
    for ((t, r), g) in targets.iter().zip(raw).zip(grads.iter_mut()) {
        for side in Side::ALL {
            let st = t.side(side);
            for j in 0..st.k() {
                if !st.offset_valid[j] {
                    continue;
                }
                let (l, d) = smooth_l1(r[side.index()].offsets[j], st.offsets[j], beta);
                sum += l;
                g[side.index()][j] = d;
                count += 1;
            }
        }
    }
    scale_grads(&mut grads, count);
    Ok((Reduced::from_sum(sum, count), grads))
}

fn scale_grads(grads: &mut [[Vec<f64>; 4]], count: usize) {
    if count == 0 {
        return;
    }
    let inv = 1.0 / count as f64;
    grads.iter_mut().flat_map(|g| g.iter_mut()).flat_map(|v| v.iter_mut()).for_each(|v| *v *= inv);
}

/// Mean BCE of objectness logits against 0/1 labels.
pub fn objectness_loss(logits: &[f64], labels: &[f64]) -> Result<(Reduced, Vec<f64>)> {
    check_len("objectness labels", logits.len(), labels.len())?;
    let n = logits.len();
    let mut sum = 0.0;
    let mut grads = Vec::with_capacity(n);
    for (l, y) in logits.iter().zip(labels) {
        let (v, d) = bce_with_logits(*l, *y);
        sum += v;
        grads.push(if n > 0 { d / n as f64 } else { 0.0 });
    }
    Ok((Reduced::from_sum(sum, n), grads))
}

/// Loss weights. The proposal-network term is not modeled, so `lambda1`
/// multiplies a term that is always zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossWeights {
    pub fn new(lambda2: f64) -> Result<Self> {
        if !(lambda2 >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda2 must be nonnegative, got {lambda2}")));
        }
        Ok(Self { lambda1: 0.0, lambda2 })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.0, lambda2: 1.0 }
    }
}

/// `cls + lambda2 * (bucketing + reg)`; the proposal-network term is zero.
pub fn total_loss(cls: f64, bucketing: f64, reg: f64, w: LossWeights) -> f64 {
    let rpn = 0.0;
    w.lambda1 * rpn + cls + w.lambda2 * (bucketing + reg)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub bucketing: f64,
    pub reg: f64,
    pub total: f64,
    pub n_cls: usize,
    pub n_bucketing: usize,
    pub n_reg: usize,
}

impl LossReport {
    pub fn new(cls: Reduced, bucketing: Reduced, reg: Reduced, w: LossWeights) -> Self {
        Self {
            cls: cls.value,
            bucketing: bucketing.value,
            reg: reg.value,
            total: total_loss(cls.value, bucketing.value, reg.value, w),
            n_cls: cls.count,
            n_bucketing: bucketing.count,
            n_reg: reg.count,
        }
    }

    pub const CSV_HEADER: &'static str = "epoch,cls,bucketing,reg,total";

    pub fn csv_row(&self, epoch: usize) -> String {
        format!("{epoch},{},{},{},{}", self.cls, self.bucketing, self.reg, self.total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bucketing::{encode_box, TargetDesign};
    use crate::geometry::BBox;
    use crate::ndmath::{finite_diff_grad, max_rel_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bce_examples() {
        let (l, g) = bce_with_logits(0.0, 1.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g, -0.5);
        let (l, _) = bce_with_logits(50.0, 1.0);
        assert!(l < 1e-20 && l.is_finite());
        let (l, _) = bce_with_logits(-50.0, 0.0);
        assert!(l < 1e-20);
        let (l, g) = bce_with_logits(-800.0, 1.0);
        assert!((l - 800.0).abs() < 1e-9 && (g + 1.0).abs() < 1e-15);
    }

    #[test]
    fn bce_symmetry() {
        for l in [-30.0, -2.5, -0.1, 0.0, 0.3, 4.0, 40.0] {
            assert_eq!(bce_with_logits(l, 1.0).0, bce_with_logits(-l, 0.0).0);
        }
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(1.0, 1.0, 1.0), (0.0, 0.0));
        assert_eq!(smooth_l1(0.5, 0.0, 1.0).0, 0.125);
        assert_eq!(smooth_l1(2.0, 0.0, 1.0).0, 1.5);
        assert_eq!(smooth_l1(-2.0, 0.0, 1.0), (1.5, -1.0));
    }

    #[test]
    fn smooth_l1_c1_at_beta() {
        for beta in [0.5, 1.0, 2.0] {
            for s in [-1.0, 1.0] {
                let (li, gi) = smooth_l1(s * (beta - 1e-12), 0.0, beta);
                let (lo, go) = smooth_l1(s * (beta + 1e-12), 0.0, beta);
                assert!((li - lo).abs() < 1e-9);
                assert!((gi - go).abs() < 1e-9);
            }
        }
    }

    fn single_side_targets() -> BoxTargets {
        // k = 2; only the left side is in range
        let p = BBox::new(0., 0., 10., 10.).unwrap();
        let g = BBox::new(2., -100., 300., 200.).unwrap();
        encode_box(&p, &g, 1.0, 2, TargetDesign::default()).unwrap()
    }

    #[test]
    fn bucketing_single_counted_bucket() {
        let t = single_side_targets();
        assert!(t.left.in_range && !t.right.in_range && !t.top.in_range && !t.down.in_range);
        assert_eq!(t.left.labels, vec![BucketLabel::Positive, BucketLabel::Ignore]);
        let raw = [RawSide::zeros(2), RawSide::zeros(2), RawSide::zeros(2), RawSide::zeros(2)];
        let (r, g) = bucketing_loss(&[t], &[raw]).unwrap();
        assert_eq!(r.count, 1);
        assert!((r.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g[0][0], vec![-0.5, 0.0]);
        assert!(g[0][1].iter().chain(&g[0][2]).chain(&g[0][3]).all(|v| *v == 0.0));
    }

    #[test]
    fn bucketing_confident_is_near_zero() {
        let p = BBox::new(0., 0., 10., 10.).unwrap();
        let t = encode_box(&p, &BBox::new(1., 1., 9., 9.).unwrap(), 1.7, 7, TargetDesign::default()).unwrap();
        let raw = Side::ALL.map(|s| {
            let st = t.side(s);
            RawSide {
                logits: st.labels.iter().map(|l| if *l == BucketLabel::Positive { 50.0 } else { -50.0 }).collect(),
                offsets: vec![0.0; 7],
            }
        });
        let (r, _) = bucketing_loss(&[t], &[raw]).unwrap();
        assert!(r.value < 1e-20);
    }

    #[test]
    fn empty_reduction_is_zero() {
        let p = BBox::new(0., 0., 10., 10.).unwrap();
        let far = BBox::new(500., 500., 600., 600.).unwrap();
        let t = encode_box(&p, &far, 1.7, 2, TargetDesign::default()).unwrap();
        let raw = Side::ALL.map(|_| RawSide::zeros(2));
        let (r, g) = bucketing_loss(&[t.clone()], &[raw.clone()]).unwrap();
        assert_eq!(r, Reduced { value: 0.0, count: 0 });
        assert!(g[0].iter().flatten().all(|v| *v == 0.0));
        let (r, _) = regression_loss(&[t], &[raw], 1.0).unwrap();
        assert_eq!(r.count, 0);
        assert_eq!(objectness_loss(&[], &[]).unwrap().0.value, 0.0);
    }

    #[test]
    fn regression_examples() {
        let t = single_side_targets();
        let mut raw = Side::ALL.map(|s| RawSide { logits: vec![0.0; 2], offsets: t.side(s).offsets.clone() });
        let (r, _) = regression_loss(&[t.clone()], &[raw.clone()], 1.0).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.count, 2);

        let plain = TargetDesign { use_ignore: true, use_top2: false };
        let p = BBox::new(0., 0., 10., 10.).unwrap();
        let g = BBox::new(2., -100., 300., 200.).unwrap();
        let t1 = encode_box(&p, &g, 1.0, 2, plain).unwrap();
        raw[0].offsets = vec![t1.left.offsets[0] + 0.5, 42.0];
        let (r, grads) = regression_loss(&[t1], &[raw], 1.0).unwrap();
        assert_eq!(r.count, 1);
        assert!((r.value - 0.125).abs() < 1e-15);
        assert_eq!(grads[0][0][1], 0.0);
    }

    #[test]
    fn total_loss_weights() {
        assert_eq!(total_loss(0.5, 0.25, 0.25, LossWeights::new(1.0).unwrap()), 1.0);
        assert_eq!(total_loss(0.5, 0.25, 0.25, LossWeights::new(1.5).unwrap()), 1.25);
        assert_eq!(total_loss(0.0, 0.0, 0.0, LossWeights::default()), 0.0);
        assert!(LossWeights::new(-1.0).is_err());
    }

    #[test]
    fn csv_row_format() {
        let r = LossReport::new(
            Reduced { value: 0.5, count: 2 },
            Reduced { value: 0.25, count: 4 },
            Reduced { value: 0.125, count: 1 },
            LossWeights::default(),
        );
        assert_eq!(r.csv_row(3), "3,0.5,0.25,0.125,0.875");
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let k = 4;
            let mut targets = Vec::new();
            for _ in 0..3 {
                let p = BBox::new(0., 0., 20., 16.).unwrap();
                let g = BBox::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(17.0..23.0),
                    rng.random_range(13.0..19.0),
                )
                .unwrap();
                targets.push(encode_box(&p, &g, 1.7, k, TargetDesign::default()).unwrap());
            }
            let n = targets.len() * 4 * k;
            let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let offsets: Vec<f64> = (0..n).map(|_| rng.random_range(-2.5..2.5)).collect();
            let pack = |lg: &[f64], of: &[f64]| -> Vec<[RawSide; 4]> {
                (0..targets.len())
                    .map(|b| {
                        std::array::from_fn(|s| {
                            let at = (b * 4 + s) * k;
                            RawSide { logits: lg[at..at + k].to_vec(), offsets: of[at..at + k].to_vec() }
                        })
                    })
                    .collect()
            };
            let f = |p: &[f64]| {
                let raw = pack(&p[..n], &p[n..]);
                bucketing_loss(&targets, &raw).unwrap().0.value + regression_loss(&targets, &raw, 1.0).unwrap().0.value
            };
            let point: Vec<f64> = logits.iter().chain(&offsets).copied().collect();
            let numeric = finite_diff_grad(f, &point, 1e-6);
            let raw = pack(&logits, &offsets);
            let (_, gb) = bucketing_loss(&targets, &raw).unwrap();
            let (_, gr) = regression_loss(&targets, &raw, 1.0).unwrap();
            let analytic: Vec<f64> = gb
                .iter()
                .flat_map(|s| s.iter().flatten().copied())
                .chain(gr.iter().flat_map(|s| s.iter().flatten().copied()))
                .collect();
            let err = max_rel_error(&analytic, &numeric);
            assert!(err <= 1e-5, "seed {seed}: {err}");
        }
    }
}
