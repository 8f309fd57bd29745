//! The training objective shared by every head, prediction to boxes, and the
//! whole-head gradient check.

use serde::{Deserialize, Serialize};

use super::{baseline_decode, baseline_encode, BaselineHeadParams, HeadConfig, SablHeadParams, SideGrads};
use crate::bucketing::{decode_box, encode_box, layout_from_box, BoxTargets, RawSide, TargetDesign};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::losses::{
    bucketing_loss, objectness_loss, regression_loss, smooth_l1, LossReport, LossWeights, Reduced,
};
use crate::ndmath::{rel_error, Grid, ParamSet};

/// One RoI: its feature, the proposal it came from and, for positives, the
/// matched ground truth. Negatives only train objectness.
#[derive(Debug, Clone)]
pub struct Sample {
    pub feature: Grid,
    pub proposal: BBox,
    pub gt: Option<BBox>,
}

/// Target and loss settings used for training and decoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub sigma: f64,
    pub design: TargetDesign,
    pub beta: f64,
    pub weights: LossWeights,
    /// Baseline delta targets are divided by these before the loss.
    pub target_std: [f64; 4],
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            sigma: 1.7,
            design: TargetDesign::default(),
            beta: 1.0,
            weights: LossWeights::default(),
            target_std: [0.1, 0.1, 0.2, 0.2],
        }
    }
}

/// A refined proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Refined {
    pub bbox: BBox,
    pub objectness: f64,
    pub loc_confidence: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct HeadLoss<P> {
    pub report: LossReport,
    pub grads: Option<P>,
    /// Concatenated ReLU sign pattern of every sample.
    pub relu_pattern: Vec<bool>,
}

pub trait Head: ParamSet + Send + Sync {
    fn cfg(&self) -> HeadConfig;

    /// Batch objective `cls + lambda2 (bucketing + reg)` and, if asked, its
    /// gradient.
    fn loss(&self, samples: &[Sample], s: &LossSettings, with_grad: bool) -> Result<HeadLoss<Self>>;

    fn predict(&self, feature: &Grid, proposal: &BBox, s: &LossSettings) -> Result<Refined>;
}

fn objectness_terms(logits: &[f64], samples: &[Sample]) -> Result<(Reduced, Vec<f64>)> {
    let labels: Vec<f64> = samples.iter().map(|s| if s.gt.is_some() { 1.0 } else { 0.0 }).collect();
    objectness_loss(logits, &labels)
}

impl Head for SablHeadParams {
    fn cfg(&self) -> HeadConfig {
        self.cfg
    }

    fn loss(&self, samples: &[Sample], s: &LossSettings, with_grad: bool) -> Result<HeadLoss<Self>> {
        let k = self.cfg.k;
        let fp = self.fingerprint();
        let outs = samples.iter().map(|x| self.forward_tagged(&x.feature, fp)).collect::<Result<Vec<_>>>()?;
        let logits: Vec<f64> = outs.iter().map(|o| o.obj_logit).collect();
        let (cls, g_obj) = objectness_terms(&logits, samples)?;
        let mut pos = Vec::new();
        let mut targets: Vec<BoxTargets> = Vec::new();
        let mut raws: Vec<[RawSide; 4]> = Vec::new();
        for (i, x) in samples.iter().enumerate() {
            if let Some(gt) = &x.gt {
                targets.push(encode_box(&x.proposal, gt, s.sigma, k, s.design)?);
                raws.push(outs[i].raw.clone());
                pos.push(i);
            }
        }
        let (rb, gb) = bucketing_loss(&targets, &raws)?;
        let (rr, gr) = regression_loss(&targets, &raws, s.beta)?;
        let report = LossReport::new(cls, rb, rr, s.weights);
        let relu_pattern = outs.iter().flat_map(|o| o.cache.relu_pattern()).collect();
        let grads = if with_grad {
            let lam = s.weights.lambda2;
            let mut total = self.zeros_like();
            let mut next_pos = 0;
            for (i, out) in outs.iter().enumerate() {
                let mut up = SideGrads::zeros(k);
                up.obj_logit = g_obj[i];
                if pos.get(next_pos) == Some(&i) {
                    for side in 0..4 {
                        up.logits[side] = gb[next_pos][side].iter().map(|g| lam * g).collect();
                        up.offsets[side] = gr[next_pos][side].iter().map(|g| lam * g).collect();
                    }
                    next_pos += 1;
                }
                self.backward_into(out, &up, fp, &mut total)?;
            }
            Some(total)
        } else {
            None
        };
        Ok(HeadLoss { report, grads, relu_pattern })
    }

    fn predict(&self, feature: &Grid, proposal: &BBox, s: &LossSettings) -> Result<Refined> {
        let out = self.forward(feature)?;
        let (xl, yl) = layout_from_box(proposal, s.sigma, self.cfg.k)?;
        let d = decode_box(&out.predictions(), &xl, &yl)?;
        Ok(Refined { bbox: d.bbox, objectness: out.objectness(), loc_confidence: d.loc_confidence, degenerate: d.degenerate })
    }
}

impl Head for BaselineHeadParams {
    fn cfg(&self) -> HeadConfig {
        self.cfg
    }

    fn loss(&self, samples: &[Sample], s: &LossSettings, with_grad: bool) -> Result<HeadLoss<Self>> {
        if !(s.beta > 0.0) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {}", s.beta)));
        }
        let outs = samples.iter().map(|x| self.forward(&x.feature)).collect::<Result<Vec<_>>>()?;
        let logits: Vec<f64> = outs.iter().map(|o| o.obj_logit).collect();
        let (cls, g_obj) = objectness_terms(&logits, samples)?;
        let mut sum = 0.0;
        let mut count = 0;
        let mut g_deltas = vec![[0.0; 4]; samples.len()];
        for (i, x) in samples.iter().enumerate() {
            let Some(gt) = &x.gt else { continue };
            let t = baseline_encode(&x.proposal, gt, self.variant)?;
            for j in 0..4 {
                let (l, g) = smooth_l1(outs[i].deltas[j], t[j] / s.target_std[j], s.beta);
                sum += l;
                g_deltas[i][j] = g;
                count += 1;
            }
        }
        let reg = if count == 0 { Reduced::default() } else { Reduced { value: sum / count as f64, count } };
        let report = LossReport::new(cls, Reduced::default(), reg, s.weights);
        let relu_pattern = outs.iter().flat_map(|o| o.cache.relu_pattern()).collect();
        let grads = if with_grad {
            let scale = if count == 0 { 0.0 } else { s.weights.lambda2 / count as f64 };
            let mut total = self.zeros_like();
            for (i, out) in outs.iter().enumerate() {
                let gd = g_deltas[i].map(|g| g * scale);
                total.add_scaled(&self.backward(out, &gd, g_obj[i])?, 1.0);
            }
            Some(total)
        } else {
            None
        };
        Ok(HeadLoss { report, grads, relu_pattern })
    }

    fn predict(&self, feature: &Grid, proposal: &BBox, s: &LossSettings) -> Result<Refined> {
        let out = self.forward(feature)?;
        let deltas = std::array::from_fn(|j| out.deltas[j] * s.target_std[j]);
        let bbox = baseline_decode(proposal, &deltas, self.variant)?;
        Ok(Refined { bbox, objectness: out.objectness(), loc_confidence: 1.0, degenerate: false })
    }
}

/// Gradient-check outcome for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose `+-eps` probes changed a ReLU sign, where the loss is
    /// not differentiable and central differences are meaningless.
    pub kink_skipped: usize,
}

/// Compares the analytic gradient of the batch objective with central
/// differences, coordinate by coordinate.
pub fn gradcheck_head<H: Head>(params: &H, samples: &[Sample], s: &LossSettings, eps: f64) -> Result<Vec<GroupCheck>> {
    let base = params.loss(samples, s, true)?;
    let analytic = base.grads.expect("requested").flatten();
    let theta = params.flatten();
    let mut probe = params.clone();
    let mut eval = |t: &[f64]| -> Result<(f64, Vec<bool>)> {
        probe.assign_flat(t)?;
        let l = probe.loss(samples, s, false)?;
        Ok((l.report.total, l.relu_pattern))
    };
    let mut out = Vec::new();
    let mut at = 0;
    let mut t = theta.clone();
    for (name, tensor) in params.tensors() {
        let mut g = GroupCheck { name: name.to_string(), max_rel_error: 0.0, checked: 0, kink_skipped: 0 };
        for i in at..at + tensor.len() {
            t[i] = theta[i] + eps;
            let (fp, pp) = eval(&t)?;
            t[i] = theta[i] - eps;
            let (fm, pm) = eval(&t)?;
            t[i] = theta[i];
            if pp != base.relu_pattern || pm != base.relu_pattern {
                g.kink_skipped += 1;
                continue;
            }
            g.checked += 1;
            g.max_rel_error = g.max_rel_error.max(rel_error(analytic[i], (fp - fm) / (2.0 * eps)));
        }
        at += tensor.len();
        out.push(g);
    }
    Ok(out)
}
