use rand::Rng;

use super::{init_he, HeadConfig};
use crate::bucketing::{sigmoid, Axis, RawSide, SidePrediction};
use crate::error::{check_len, Error, Result};
use crate::ndmath::{
    aggregate, aggregate_backward, conv1d, conv1d_backward, deconv1d_x2, deconv1d_x2_backward, softmax_along_backward,
    split_halves, AttentionPair, Grid, Mat, ParamSet, Seq, Tensor,
};

/// Parameters of the side-aware head.
///
/// Pipeline: dense + ReLU on the flattened RoI feature, two attention maps
/// from a 1x1 projection, attention aggregation to one row feature and one
/// column feature, then per axis a kernel-3 conv + ReLU and a stride-2 deconv
/// whose halves are the two side features. Every side has a dense bucket
/// classifier and a dense offset regressor reading its whole k x H feature.
/// Objectness reads the mean of all side features.
#[derive(Debug, Clone, PartialEq)]
pub struct SablHeadParams {
    pub cfg: HeadConfig,
    /// `[k*k*Cf, k*k*C]`, both sides flattened in grid order.
    pub feat_w: Tensor,
    pub feat_b: Tensor,
    /// Row 0 scores the X aggregation, row 1 the Y aggregation. No bias:
    /// a constant shift cancels in the softmax.
    pub att_w: Tensor,
    pub conv_x_w: Tensor,
    pub conv_x_b: Tensor,
    pub conv_y_w: Tensor,
    pub conv_y_b: Tensor,
    pub up_x_w: Tensor,
    pub up_x_b: Tensor,
    pub up_y_w: Tensor,
    pub up_y_b: Tensor,
    /// `[4*k, k*H]`; row `s*k + j` scores bucket `j` of side `s`.
    pub cls_w: Tensor,
    pub cls_b: Tensor,
    pub reg_w: Tensor,
    pub reg_b: Tensor,
    pub obj_w: Tensor,
    pub obj_b: Tensor,
}

impl ParamSet for SablHeadParams {
    fn kind(&self) -> &'static str {
        "sabl"
    }

    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("feat_w", &self.feat_w),
            ("feat_b", &self.feat_b),
            ("att_w", &self.att_w),
            ("conv_x_w", &self.conv_x_w),
            ("conv_x_b", &self.conv_x_b),
            ("conv_y_w", &self.conv_y_w),
            ("conv_y_b", &self.conv_y_b),
            ("up_x_w", &self.up_x_w),
            ("up_x_b", &self.up_x_b),
            ("up_y_w", &self.up_y_w),
            ("up_y_b", &self.up_y_b),
            ("cls_w", &self.cls_w),
            ("cls_b", &self.cls_b),
            ("reg_w", &self.reg_w),
            ("reg_b", &self.reg_b),
            ("obj_w", &self.obj_w),
            ("obj_b", &self.obj_b),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("feat_w", &mut self.feat_w),
            ("feat_b", &mut self.feat_b),
            ("att_w", &mut self.att_w),
            ("conv_x_w", &mut self.conv_x_w),
            ("conv_x_b", &mut self.conv_x_b),
            ("conv_y_w", &mut self.conv_y_w),
            ("conv_y_b", &mut self.conv_y_b),
            ("up_x_w", &mut self.up_x_w),
            ("up_x_b", &mut self.up_x_b),
            ("up_y_w", &mut self.up_y_w),
            ("up_y_b", &mut self.up_y_b),
            ("cls_w", &mut self.cls_w),
            ("cls_b", &mut self.cls_b),
            ("reg_w", &mut self.reg_w),
            ("reg_b", &mut self.reg_b),
            ("obj_w", &mut self.obj_w),
            ("obj_b", &mut self.obj_b),
        ]
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SablCache {
    fingerprint: u64,
    input: Grid,
    pre_f: Grid,
    f: Grid,
    att: AttentionPair,
    agg: [Seq; 2],
    conv_pre: [Seq; 2],
    conv_act: [Seq; 2],
    sides: [Seq; 4],
    pooled: Vec<f64>,
}

impl SablCache {
    /// Sign pattern of every ReLU input; the head is smooth in the
    /// parameters wherever this pattern is constant.
    pub fn relu_pattern(&self) -> impl Iterator<Item = bool> + '_ {
        self.pre_f
            .data
            .iter()
            .chain(&self.conv_pre[0].data)
            .chain(&self.conv_pre[1].data)
            .map(|v| *v > 0.0)
    }

    pub fn attention(&self) -> &AttentionPair {
        &self.att
    }
}

#[derive(Debug, Clone)]
pub struct SablOutput {
    /// Ordered as [`Side::ALL`].
    pub raw: [RawSide; 4],
    pub obj_logit: f64,
    pub cache: SablCache,
}

impl SablOutput {
    pub fn predictions(&self) -> [SidePrediction; 4] {
        self.raw.each_ref().map(RawSide::to_prediction)
    }

    pub fn objectness(&self) -> f64 {
        sigmoid(self.obj_logit)
    }
}

/// Upstream gradients w.r.t. the raw outputs of one forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct SideGrads {
    pub logits: [Vec<f64>; 4],
    pub offsets: [Vec<f64>; 4],
    pub obj_logit: f64,
}

impl SideGrads {
    pub fn zeros(k: usize) -> Self {
        Self {
            logits: std::array::from_fn(|_| vec![0.0; k]),
            offsets: std::array::from_fn(|_| vec![0.0; k]),
            obj_logit: 0.0,
        }
    }
}

/// Four partial sums, combined in a fixed order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(u, v)| u * v).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    dst.iter_mut().zip(x).for_each(|(d, v)| *d += a * v);
}

fn relu_seq(x: &Seq) -> Seq {
    Seq { data: x.data.iter().map(|v| v.max(0.0)).collect(), ..*x }
}

fn relu_back_seq(pre: &Seq, g: &Seq) -> Seq {
    let data = pre.data.iter().zip(&g.data).map(|(p, g)| if *p > 0.0 { *g } else { 0.0 }).collect();
    Seq { data, ..*g }
}

impl SablHeadParams {
    pub fn zeros(cfg: HeadConfig) -> Result<Self> {
        cfg.validate()?;
        let HeadConfig { k, channels: c, feat_channels: cf, hidden: h } = cfg;
        let kk = k * k;
        Ok(Self {
            cfg,
            feat_w: Tensor::zeros(&[kk * cf, kk * c]),
            feat_b: Tensor::zeros(&[kk * cf]),
            att_w: Tensor::zeros(&[2, cf]),
            conv_x_w: Tensor::zeros(&[h, cf, 3]),
            conv_x_b: Tensor::zeros(&[h]),
            conv_y_w: Tensor::zeros(&[h, cf, 3]),
            conv_y_b: Tensor::zeros(&[h]),
            up_x_w: Tensor::zeros(&[2, h, h]),
            up_x_b: Tensor::zeros(&[h]),
            up_y_w: Tensor::zeros(&[2, h, h]),
            up_y_b: Tensor::zeros(&[h]),
            cls_w: Tensor::zeros(&[4 * k, k * h]),
            cls_b: Tensor::zeros(&[4 * k]),
            reg_w: Tensor::zeros(&[4 * k, k * h]),
            reg_b: Tensor::zeros(&[4 * k]),
            obj_w: Tensor::zeros(&[1, h]),
            obj_b: Tensor::zeros(&[1]),
        })
    }

    /// He-normal weights and zero biases.
    pub fn init<R: Rng>(cfg: HeadConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        let HeadConfig { k, channels: c, feat_channels: cf, hidden: h } = cfg;
        let fans = [
            ("feat_w", k * k * c),
            ("att_w", cf),
            ("conv_x_w", 3 * cf),
            ("conv_y_w", 3 * cf),
            ("up_x_w", h),
            ("up_y_w", h),
            ("cls_w", k * h),
            ("reg_w", k * h),
            ("obj_w", h),
        ];
        init_he(&mut p, &fans, rng);
        Ok(p)
    }

    fn conv(&self, axis: usize) -> (&Tensor, &Tensor, &Tensor, &Tensor) {
        if axis == 0 {
            (&self.conv_x_w, &self.conv_x_b, &self.up_x_w, &self.up_x_b)
        } else {
            (&self.conv_y_w, &self.conv_y_b, &self.up_y_w, &self.up_y_b)
        }
    }

    fn row(t: &Tensor, r: usize) -> &[f64] {
        let n = t.shape[1];
        &t.data[r * n..(r + 1) * n]
    }

    fn row_mut(t: &mut Tensor, r: usize) -> &mut [f64] {
        let n = t.shape[1];
        &mut t.data[r * n..(r + 1) * n]
    }

    pub fn forward(&self, input: &Grid) -> Result<SablOutput> {
        self.forward_tagged(input, self.fingerprint())
    }

    /// `forward` with the parameter fingerprint already computed.
    pub(crate) fn forward_tagged(&self, input: &Grid, fingerprint: u64) -> Result<SablOutput> {
        let HeadConfig { k, channels: c, feat_channels: cf, hidden: h } = self.cfg;
        if input.height != k || input.width != k || input.channels != c {
            return Err(Error::ShapeMismatch {
                what: "roi feature",
                expected: k * k * c,
                got: input.height * input.width * input.channels,
            });
        }
        let mut pre_f = Grid::zeros(k, k, cf);
        for (o, v) in pre_f.data.iter_mut().enumerate() {
            *v = self.feat_b.data[o] + dot(Self::row(&self.feat_w, o), &input.data);
        }
        let f = Grid { data: pre_f.data.iter().map(|v| v.max(0.0)).collect(), ..pre_f };
        let mut lx = Mat::zeros(k, k);
        let mut ly = Mat::zeros(k, k);
        for y in 0..k {
            for x in 0..k {
                *lx.at_mut(y, x) = dot(Self::row(&self.att_w, 0), f.pixel(y, x));
                *ly.at_mut(y, x) = dot(Self::row(&self.att_w, 1), f.pixel(y, x));
            }
        }
        let att = AttentionPair::from_logits(&lx, &ly);
        let (fx, fy) = aggregate(&f, &att)?;
        let agg = [fx, fy];
        let mut conv_pre = Vec::with_capacity(2);
        let mut conv_act = Vec::with_capacity(2);
        let mut sides = Vec::with_capacity(4);
        for (a, seq) in agg.iter().enumerate() {
            let (cw, cb, uw, ub) = self.conv(a);
            let pre = conv1d(seq, cw, &cb.data)?;
            let act = relu_seq(&pre);
            let up = deconv1d_x2(&act, uw, &ub.data)?;
            let (lo, hi) = split_halves(&up)?;
            sides.push(lo);
            sides.push(hi);
            conv_pre.push(pre);
            conv_act.push(act);
        }
        let sides: [Seq; 4] = sides.try_into().expect("four sides");
        let raw = std::array::from_fn(|s| {
            let feat = &sides[s].data;
            let out = |w: &Tensor, b: &Tensor| -> Vec<f64> {
                (0..k).map(|j| b.data[s * k + j] + dot(Self::row(w, s * k + j), feat)).collect()
            };
            RawSide { logits: out(&self.cls_w, &self.cls_b), offsets: out(&self.reg_w, &self.reg_b) }
        });
        let mut pooled = vec![0.0; h];
        let inv = 1.0 / (4 * k) as f64;
        for s in &sides {
            for j in 0..k {
                axpy(&mut pooled, inv, s.row(j));
            }
        }
        let obj_logit = self.obj_b.data[0] + dot(&self.obj_w.data, &pooled);
        let cache = SablCache {
            fingerprint,
            input: input.clone(),
            pre_f,
            f,
            att,
            agg,
            conv_pre: conv_pre.try_into().expect("two axes"),
            conv_act: conv_act.try_into().expect("two axes"),
            sides,
            pooled,
        };
        Ok(SablOutput { raw, obj_logit, cache })
    }

    /// Parameter gradients for upstream gradients `g` on the outputs of
    /// `out`, which must come from `forward` with these exact parameters.
    pub fn backward(&self, out: &SablOutput, g: &SideGrads) -> Result<SablHeadParams> {
        let mut grad = self.zeros_like();
        self.backward_into(out, g, self.fingerprint(), &mut grad)?;
        Ok(grad)
    }

    /// Adds the parameter gradients of one sample to `grad`.
    pub(crate) fn backward_into(&self, out: &SablOutput, g: &SideGrads, fingerprint: u64, grad: &mut Self) -> Result<()> {
        let cache = &out.cache;
        if cache.fingerprint != fingerprint {
            return Err(Error::StaleCache);
        }
        let HeadConfig { k, feat_channels: cf, hidden: h, .. } = self.cfg;
        for s in 0..4 {
            check_len("logit grads", k, g.logits[s].len())?;
            check_len("offset grads", k, g.offsets[s].len())?;
        }
        let mut g_sides: [Seq; 4] = std::array::from_fn(|_| Seq::zeros(k, h));
        let g_pool_each = {
            let go = g.obj_logit;
            grad.obj_b.data[0] += go;
            axpy(&mut grad.obj_w.data, go, &cache.pooled);
            let scale = go / (4 * k) as f64;
            self.obj_w.data.iter().map(|w| w * scale).collect::<Vec<_>>()
        };
        for s in 0..4 {
            let feat = &cache.sides[s].data;
            for j in 0..k {
                let (gl, gr, r) = (g.logits[s][j], g.offsets[s][j], s * k + j);
                grad.cls_b.data[r] += gl;
                grad.reg_b.data[r] += gr;
                axpy(Self::row_mut(&mut grad.cls_w, r), gl, feat);
                axpy(Self::row_mut(&mut grad.reg_w, r), gr, feat);
                let gs = &mut g_sides[s].data;
                axpy(gs, gl, Self::row(&self.cls_w, r));
                axpy(gs, gr, Self::row(&self.reg_w, r));
                axpy(g_sides[s].row_mut(j), 1.0, &g_pool_each);
            }
        }
        let mut g_agg = Vec::with_capacity(2);
        for a in 0..2 {
            let (cw, _, uw, _) = self.conv(a);
            let g_up = Seq::concat(&g_sides[2 * a], &g_sides[2 * a + 1])?;
            let (g_act, g_uw, g_ub) = deconv1d_x2_backward(&cache.conv_act[a], uw, &g_up)?;
            let g_pre = relu_back_seq(&cache.conv_pre[a], &g_act);
            let (g_seq, g_cw, g_cb) = conv1d_backward(&cache.agg[a], cw, &g_pre)?;
            let (dcw, dcb, duw, dub) = if a == 0 {
                (&mut grad.conv_x_w, &mut grad.conv_x_b, &mut grad.up_x_w, &mut grad.up_x_b)
            } else {
                (&mut grad.conv_y_w, &mut grad.conv_y_b, &mut grad.up_y_w, &mut grad.up_y_b)
            };
            dcw.add_assign(&g_cw);
            axpy(&mut dcb.data, 1.0, &g_cb);
            duw.add_assign(&g_uw);
            axpy(&mut dub.data, 1.0, &g_ub);
            g_agg.push(g_seq);
        }
        let (mut g_f, g_mx, g_my) = aggregate_backward(&cache.f, &cache.att, &g_agg[0], &g_agg[1])?;
        let g_lx = softmax_along_backward(Axis::Y, &cache.att.mx, &g_mx);
        let g_ly = softmax_along_backward(Axis::X, &cache.att.my, &g_my);
        for y in 0..k {
            for x in 0..k {
                let (gx, gy) = (g_lx.at(y, x), g_ly.at(y, x));
                let px = cache.f.pixel(y, x);
                axpy(Self::row_mut(&mut grad.att_w, 0), gx, px);
                axpy(Self::row_mut(&mut grad.att_w, 1), gy, px);
                for ch in 0..cf {
                    let v = gx * self.att_w.data[ch] + gy * self.att_w.data[cf + ch];
                    *g_f.at_mut(y, x, ch) += v;
                }
            }
        }
        for (o, (pre, go)) in cache.pre_f.data.iter().zip(&g_f.data).enumerate() {
            if *pre > 0.0 {
                grad.feat_b.data[o] += go;
                axpy(Self::row_mut(&mut grad.feat_w, o), *go, &cache.input.data);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn cfg() -> HeadConfig {
        HeadConfig { k: 7, channels: 8, feat_channels: 6, hidden: 5 }
    }

    fn random_grid(rng: &mut ChaCha8Rng, k: usize, c: usize) -> Grid {
        let data = (0..k * k * c).map(|_| StandardNormal.sample(rng)).collect();
        Grid::from_vec(k, k, c, data).unwrap()
    }

    #[test]
    fn zero_params_give_half_confidence() {
        let p = SablHeadParams::zeros(cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = p.forward(&random_grid(&mut rng, 7, 8)).unwrap();
        for pred in out.predictions() {
            assert_eq!(pred.confidences, vec![0.5; 7]);
            assert_eq!(pred.offsets, vec![0.0; 7]);
        }
        assert_eq!(out.objectness(), 0.5);
    }

    #[test]
    fn output_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = SablHeadParams::init(HeadConfig::default(), &mut rng).unwrap();
        let g = random_grid(&mut rng, 7, 8);
        let a = p.forward(&g).unwrap();
        let b = p.forward(&g).unwrap();
        assert_eq!(a.raw.len(), 4);
        for s in &a.raw {
            assert_eq!(s.logits.len(), 7);
            assert_eq!(s.offsets.len(), 7);
        }
        assert_eq!(a.raw, b.raw);
        assert_eq!(a.obj_logit.to_bits(), b.obj_logit.to_bits());
        assert!(p.forward(&random_grid(&mut rng, 6, 8)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = SablHeadParams::init(cfg(), &mut rng).unwrap();
        let out = p.forward(&random_grid(&mut rng, 7, 8)).unwrap();
        let g = p.backward(&out, &SideGrads::zeros(7)).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = SablHeadParams::init(cfg(), &mut rng).unwrap();
        let out = p.forward(&random_grid(&mut rng, 7, 8)).unwrap();
        p.cls_b.data[0] += 1e-3;
        assert!(matches!(p.backward(&out, &SideGrads::zeros(7)), Err(Error::StaleCache)));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = SablHeadParams::init(cfg(), &mut rng).unwrap();
        let mut q = SablHeadParams::zeros(cfg()).unwrap();
        q.load_checkpoint(&p.to_checkpoint()).unwrap();
        assert_eq!(p, q);
    }

    /// Random linear functional of every output, differentiated both ways.
    #[test]
    fn backward_matches_finite_differences() {
        let cfg = HeadConfig { k: 3, channels: 5, feat_channels: 3, hidden: 4 };
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let p = SablHeadParams::init(cfg, &mut rng).unwrap();
            let input = random_grid(&mut rng, 3, 5);
            let mut up = SideGrads::zeros(3);
            for s in 0..4 {
                up.logits[s].iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
                up.offsets[s].iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
            }
            up.obj_logit = StandardNormal.sample(&mut rng);
            let objective = |q: &SablHeadParams| -> (f64, Vec<bool>) {
                let out = q.forward(&input).unwrap();
                let mut v = up.obj_logit * out.obj_logit;
                for s in 0..4 {
                    v += dot(&up.logits[s], &out.raw[s].logits) + dot(&up.offsets[s], &out.raw[s].offsets);
                }
                (v, out.cache.relu_pattern().collect())
            };
            let out = p.forward(&input).unwrap();
            let base_pattern: Vec<bool> = out.cache.relu_pattern().collect();
            let analytic = p.backward(&out, &up).unwrap().flatten();
            let theta = p.flatten();
            let mut q = p.clone();
            let eps = 1e-6;
            let mut checked = 0;
            for i in 0..theta.len() {
                let mut t = theta.clone();
                t[i] = theta[i] + eps;
                q.assign_flat(&t).unwrap();
                let (fp, pp) = objective(&q);
                t[i] = theta[i] - eps;
                q.assign_flat(&t).unwrap();
                let (fm, pm) = objective(&q);
                if pp != base_pattern || pm != base_pattern {
                    continue;
                }
                checked += 1;
                let numeric = (fp - fm) / (2.0 * eps);
                let err = crate::ndmath::rel_error(analytic[i], numeric);
                assert!(err <= 1e-5, "seed {seed} param {i}: {} vs {numeric} ({err})", analytic[i]);
            }
            assert!(checked + 5 >= theta.len());
        }
    }
}
