//! Finite-difference checks of every differentiable op and of the three
//! heads, from one seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bucketing::{encode_box, Axis, BoxTargets, RawSide, TargetDesign};
use crate::error::Result;
use crate::geometry::BBox;
use crate::head::{
    gradcheck_head, BaselineHeadParams, BaselineVariant, GroupCheck, HeadConfig, LossSettings, Sample, SablHeadParams,
};
use crate::losses::{bce_with_logits, bucketing_loss, objectness_loss, regression_loss, smooth_l1};
use crate::ndmath::{
    aggregate, aggregate_backward, conv1d, conv1d_backward, deconv1d_x2, deconv1d_x2_backward, dense, dense_backward,
    finite_diff_grad, max_rel_error, relu, relu_backward, softmax_along, softmax_along_backward, AttentionPair, Grid,
    Mat, Seq, Tensor,
};
use crate::synthbench::{render_roi_feature, FeatureSpec};

/// Relative-error bound every check must meet.
pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const GRAD_EPS: f64 = 1e-6;

/// Head size used for whole-head checks; small enough that probing every
/// coordinate stays cheap.
pub const CHECK_HEAD: HeadConfig = HeadConfig { k: 3, channels: 5, feat_channels: 3, hidden: 4 };

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn group(name: &str, analytic: &[f64], f: impl Fn(&[f64]) -> f64, point: &[f64], eps: f64) -> GroupCheck {
    let numeric = finite_diff_grad(f, point, eps);
    GroupCheck {
        name: name.to_string(),
        max_rel_error: max_rel_error(analytic, &numeric),
        checked: point.len(),
        kink_skipped: 0,
    }
}

fn cat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

fn dense_check(rng: &mut ChaCha8Rng, eps: f64) -> Result<GroupCheck> {
    let (n_in, n_out) = (5, 3);
    let x = normals(rng, n_in);
    let w = Tensor::from_vec(&[n_out, n_in], normals(rng, n_in * n_out))?;
    let b = normals(rng, n_out);
    let r = normals(rng, n_out);
    let (gx, gw, gb) = dense_backward(&x, &w, &r)?;
    let f = |p: &[f64]| {
        let (x, rest) = p.split_at(n_in);
        let (wd, b) = rest.split_at(n_in * n_out);
        let w = Tensor::from_vec(&[n_out, n_in], wd.to_vec()).expect("shape");
        dot(&r, &dense(x, &w, b).expect("shape"))
    };
    Ok(group("dense", &cat(&[&gx, &gw.data, &gb]), f, &cat(&[&x, &w.data, &b]), eps))
}

fn relu_check(rng: &mut ChaCha8Rng, eps: f64) -> GroupCheck {
    // Keep inputs clear of the kink.
    let x: Vec<f64> = normals(rng, 8).into_iter().map(|v| if v.abs() < 0.05 { v + 0.1 } else { v }).collect();
    let r = normals(rng, 8);
    let g = relu_backward(&x, &r);
    group("relu", &g, |p| dot(&r, &relu(p)), &x, eps)
}

fn conv_check(rng: &mut ChaCha8Rng, eps: f64) -> Result<GroupCheck> {
    let (len, cin, cout) = (6, 3, 4);
    let x = Seq::from_vec(len, cin, normals(rng, len * cin))?;
    let w = Tensor::from_vec(&[cout, cin, 3], normals(rng, cout * cin * 3))?;
    let b = normals(rng, cout);
    let r = normals(rng, len * cout);
    let (gx, gw, gb) = conv1d_backward(&x, &w, &Seq::from_vec(len, cout, r.clone())?)?;
    let (nx, nw) = (len * cin, cout * cin * 3);
    let f = |p: &[f64]| {
        let x = Seq::from_vec(len, cin, p[..nx].to_vec()).expect("shape");
        let w = Tensor::from_vec(&[cout, cin, 3], p[nx..nx + nw].to_vec()).expect("shape");
        dot(&r, &conv1d(&x, &w, &p[nx + nw..]).expect("shape").data)
    };
    Ok(group("conv1d", &cat(&[&gx.data, &gw.data, &gb]), f, &cat(&[&x.data, &w.data, &b]), eps))
}

fn deconv_check(rng: &mut ChaCha8Rng, eps: f64) -> Result<GroupCheck> {
    let (len, cin, cout) = (4, 3, 4);
    let x = Seq::from_vec(len, cin, normals(rng, len * cin))?;
    let w = Tensor::from_vec(&[2, cout, cin], normals(rng, 2 * cout * cin))?;
    let b = normals(rng, cout);
    let r = normals(rng, 2 * len * cout);
    let (gx, gw, gb) = deconv1d_x2_backward(&x, &w, &Seq::from_vec(2 * len, cout, r.clone())?)?;
    let (nx, nw) = (len * cin, 2 * cout * cin);
    let f = |p: &[f64]| {
        let x = Seq::from_vec(len, cin, p[..nx].to_vec()).expect("shape");
        let w = Tensor::from_vec(&[2, cout, cin], p[nx..nx + nw].to_vec()).expect("shape");
        dot(&r, &deconv1d_x2(&x, &w, &p[nx + nw..]).expect("shape").data)
    };
    Ok(group("deconv1d_x2", &cat(&[&gx.data, &gw.data, &gb]), f, &cat(&[&x.data, &w.data, &b]), eps))
}

fn softmax_check(rng: &mut ChaCha8Rng, axis: Axis, eps: f64) -> Result<GroupCheck> {
    let n = 4;
    let logits = Mat::from_vec(n, n, normals(rng, n * n))?;
    let r = Mat::from_vec(n, n, normals(rng, n * n))?;
    let g = softmax_along_backward(axis, &softmax_along(axis, &logits), &r);
    let f = |p: &[f64]| dot(&r.data, &softmax_along(axis, &Mat::from_vec(n, n, p.to_vec()).expect("shape")).data);
    let name = if axis == Axis::X { "softmax_x" } else { "softmax_y" };
    Ok(group(name, &g.data, f, &logits.data, eps))
}

fn aggregate_check(rng: &mut ChaCha8Rng, eps: f64) -> Result<GroupCheck> {
    let (k, c) = (4, 3);
    let grid = Grid::from_vec(k, k, c, normals(rng, k * k * c))?;
    let att = AttentionPair::from_logits(&Mat::from_vec(k, k, normals(rng, k * k))?, &Mat::from_vec(k, k, normals(rng, k * k))?);
    let rx = normals(rng, k * c);
    let ry = normals(rng, k * c);
    let (gf, gmx, gmy) = aggregate_backward(&grid, &att, &Seq::from_vec(k, c, rx.clone())?, &Seq::from_vec(k, c, ry.clone())?)?;
    let (nf, nm) = (k * k * c, k * k);
    let f = |p: &[f64]| {
        let grid = Grid::from_vec(k, k, c, p[..nf].to_vec()).expect("shape");
        let att = AttentionPair {
            mx: Mat::from_vec(k, k, p[nf..nf + nm].to_vec()).expect("shape"),
            my: Mat::from_vec(k, k, p[nf + nm..].to_vec()).expect("shape"),
        };
        let (fx, fy) = aggregate(&grid, &att).expect("shape");
        dot(&rx, &fx.data) + dot(&ry, &fy.data)
    };
    Ok(group("aggregate", &cat(&[&gf.data, &gmx.data, &gmy.data]), f, &cat(&[&grid.data, &att.mx.data, &att.my.data]), eps))
}

fn scalar_losses(rng: &mut ChaCha8Rng, eps: f64) -> [GroupCheck; 2] {
    let logit: f64 = 3.0 * normals(rng, 1)[0];
    let label: f64 = rng.random();
    let bce = group("bce_with_logits", &[bce_with_logits(logit, label).1], |p| bce_with_logits(p[0], label).0, &[logit], eps);
    let mut d: f64 = 2.0 * normals(rng, 1)[0];
    if (d.abs() - 1.0).abs() < 1e-3 {
        d += 0.01;
    }
    let target: f64 = StandardNormal.sample(rng);
    let sl1 = group("smooth_l1", &[smooth_l1(target + d, target, 1.0).1], |p| smooth_l1(p[0], target, 1.0).0, &[target + d], eps);
    [bce, sl1]
}

fn jittered(rng: &mut ChaCha8Rng, b: &BBox, rel: f64) -> BBox {
    let (w, h) = (b.width(), b.height());
    let mut n = |s: f64| rel * s * normals(rng, 1)[0];
    let (x1, y1) = (b.x1 + n(w), b.y1 + n(h));
    let (x2, y2) = (b.x2 + n(w), b.y2 + n(h));
    BBox { x1: x1.min(x2 - 1.0), y1: y1.min(y2 - 1.0), x2, y2 }
}

fn random_pair(rng: &mut ChaCha8Rng) -> (BBox, BBox) {
    let gt = BBox::from_center(rng.random_range(40.0..60.0), rng.random_range(40.0..60.0), rng.random_range(20.0..40.0), rng.random_range(20.0..40.0));
    (jittered(rng, &gt, 0.1), gt)
}

fn unpack(p: &[f64], n: usize, k: usize) -> Vec<[RawSide; 4]> {
    (0..n)
        .map(|i| {
            std::array::from_fn(|s| {
                let at = (i * 4 + s) * 2 * k;
                RawSide { logits: p[at..at + k].to_vec(), offsets: p[at + k..at + 2 * k].to_vec() }
            })
        })
        .collect()
}

fn side_losses(rng: &mut ChaCha8Rng, eps: f64) -> Result<[GroupCheck; 3]> {
    let (k, n) = (7, 3);
    let targets: Vec<BoxTargets> = (0..n)
        .map(|_| {
            let (p, g) = random_pair(rng);
            encode_box(&p, &g, 1.7, k, TargetDesign::default())
        })
        .collect::<Result<_>>()?;
    let point = normals(rng, n * 4 * 2 * k);
    let raw = unpack(&point, n, k);
    let (_, gb) = bucketing_loss(&targets, &raw)?;
    let (_, gr) = regression_loss(&targets, &raw, 1.0)?;
    // Bucketing grads land on logits, regression grads on offsets.
    let mut ab = Vec::new();
    let mut ar = Vec::new();
    for (b, r) in gb.iter().zip(&gr) {
        for s in 0..4 {
            ab.extend(b[s].iter().copied().chain(std::iter::repeat_n(0.0, k)));
            ar.extend(std::iter::repeat_n(0.0, k).chain(r[s].iter().copied()));
        }
    }
    let fb = |p: &[f64]| bucketing_loss(&targets, &unpack(p, n, k)).expect("shape").0.value;
    let fr = |p: &[f64]| regression_loss(&targets, &unpack(p, n, k), 1.0).expect("shape").0.value;
    let logits = normals(rng, 6);
    let labels: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
    let (_, go) = objectness_loss(&logits, &labels)?;
    let fo = |p: &[f64]| objectness_loss(p, &labels).expect("shape").0.value;
    Ok([
        group("bucketing_loss", &ab, fb, &point, eps),
        group("regression_loss", &ar, fr, &point, eps),
        group("objectness_loss", &go, fo, &logits, eps),
    ])
}

/// Positive and background RoI samples for the whole-head checks.
pub fn check_samples(rng: &mut ChaCha8Rng, cfg: HeadConfig, s: &LossSettings, n: usize) -> Result<Vec<Sample>> {
    let spec = FeatureSpec { sigma: s.sigma, k: cfg.k, channels: cfg.channels, noise_std: 0.1 };
    (0..n)
        .map(|i| {
            let (p, g) = random_pair(rng);
            let gt = (i % 3 != 2).then_some(g);
            let feature = render_roi_feature(&p, gt.as_ref(), &spec, rng)?;
            Ok(Sample { feature, proposal: p, gt })
        })
        .collect()
}

fn prefixed(prefix: &str, groups: Vec<GroupCheck>) -> Vec<GroupCheck> {
    groups.into_iter().map(|g| GroupCheck { name: format!("{prefix}.{}", g.name), ..g }).collect()
}

/// Every check for one seed: the ops, the losses, then one row per
/// parameter tensor of each head.
pub fn gradcheck_suite(seed: u64, eps: f64) -> Result<Vec<GroupCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![
        dense_check(&mut rng, eps)?,
        relu_check(&mut rng, eps),
        conv_check(&mut rng, eps)?,
        deconv_check(&mut rng, eps)?,
        softmax_check(&mut rng, Axis::X, eps)?,
        softmax_check(&mut rng, Axis::Y, eps)?,
        aggregate_check(&mut rng, eps)?,
    ];
    out.extend(scalar_losses(&mut rng, eps));
    out.extend(side_losses(&mut rng, eps)?);
    let s = LossSettings::default();
    let samples = check_samples(&mut rng, CHECK_HEAD, &s, 6)?;
    let sabl = SablHeadParams::init(CHECK_HEAD, &mut rng)?;
    out.extend(prefixed("sabl", gradcheck_head(&sabl, &samples, &s, eps)?));
    for v in [BaselineVariant::BboxReg, BaselineVariant::BoundaryReg] {
        let p = BaselineHeadParams::init(v, CHECK_HEAD, &mut rng)?;
        let name = if v == BaselineVariant::BboxReg { "bbox_reg" } else { "boundary_reg" };
        out.extend(prefixed(name, gradcheck_head(&p, &samples, &s, eps)?));
    }
    Ok(out)
}
