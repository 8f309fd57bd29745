use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{init_he, HeadConfig};
use crate::bucketing::sigmoid;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::ndmath::{dense, dense_backward, relu, relu_backward, Grid, ParamSet, Tensor};

/// Largest log-scale delta accepted when decoding, as in common detectors.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BaselineVariant {
    /// Center offsets and log scale factors `(dx, dy, dw, dh)`.
    BboxReg,
    /// Per-boundary offsets `(dx1, dy1, dx2, dy2)` relative to proposal size.
    BoundaryReg,
}

/// Regression deltas of `gt` relative to `proposal`.
pub fn baseline_encode(proposal: &BBox, gt: &BBox, variant: BaselineVariant) -> Result<[f64; 4]> {
    if !proposal.has_area() || !gt.has_area() {
        return Err(Error::DegenerateProposal);
    }
    let (pw, ph) = (proposal.width(), proposal.height());
    Ok(match variant {
        BaselineVariant::BboxReg => {
            let (pcx, pcy) = proposal.center();
            let (gcx, gcy) = gt.center();
            [(gcx - pcx) / pw, (gcy - pcy) / ph, (gt.width() / pw).ln(), (gt.height() / ph).ln()]
        }
        BaselineVariant::BoundaryReg => [
            (gt.x1 - proposal.x1) / pw,
            (gt.y1 - proposal.y1) / ph,
            (gt.x2 - proposal.x2) / pw,
            (gt.y2 - proposal.y2) / ph,
        ],
    })
}

/// Applies regression deltas to `proposal`. Crossed boundaries are swapped.
pub fn baseline_decode(proposal: &BBox, deltas: &[f64; 4], variant: BaselineVariant) -> Result<BBox> {
    if !proposal.has_area() {
        return Err(Error::DegenerateProposal);
    }
    let (pw, ph) = (proposal.width(), proposal.height());
    let [a, b, c, d] = *deltas;
    let (x1, y1, x2, y2) = match variant {
        BaselineVariant::BboxReg => {
            let (pcx, pcy) = proposal.center();
            let (cx, cy) = (pcx + a * pw, pcy + b * ph);
            let w = pw * c.min(MAX_LOG_SCALE).exp();
            let h = ph * d.min(MAX_LOG_SCALE).exp();
            (cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
        }
        BaselineVariant::BoundaryReg => {
            (proposal.x1 + a * pw, proposal.y1 + b * ph, proposal.x2 + c * pw, proposal.y2 + d * ph)
        }
    };
    BBox::new(x1.min(x2), y1.min(y2), x1.max(x2), y1.max(y2))
}

/// One hidden ReLU layer on the flattened RoI feature, then four deltas and
/// an objectness logit.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineHeadParams {
    pub variant: BaselineVariant,
    pub cfg: HeadConfig,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ParamSet for BaselineHeadParams {
    fn kind(&self) -> &'static str {
        match self.variant {
            BaselineVariant::BboxReg => "bbox_reg",
            BaselineVariant::BoundaryReg => "boundary_reg",
        }
    }

    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("w1", &mut self.w1), ("b1", &mut self.b1), ("w2", &mut self.w2), ("b2", &mut self.b2)]
    }
}

#[derive(Debug, Clone)]
pub struct BaselineCache {
    fingerprint: u64,
    input: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl BaselineCache {
    pub fn relu_pattern(&self) -> impl Iterator<Item = bool> + '_ {
        self.pre.iter().map(|v| *v > 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct BaselineOutput {
    /// Deltas in normalized units (divide-by-std space).
    pub deltas: [f64; 4],
    pub obj_logit: f64,
    pub cache: BaselineCache,
}

impl BaselineOutput {
    pub fn objectness(&self) -> f64 {
        sigmoid(self.obj_logit)
    }
}

impl BaselineHeadParams {
    pub fn zeros(variant: BaselineVariant, cfg: HeadConfig) -> Result<Self> {
        cfg.validate()?;
        let n_in = cfg.k * cfg.k * cfg.channels;
        Ok(Self {
            variant,
            cfg,
            w1: Tensor::zeros(&[cfg.hidden, n_in]),
            b1: Tensor::zeros(&[cfg.hidden]),
            w2: Tensor::zeros(&[5, cfg.hidden]),
            b2: Tensor::zeros(&[5]),
        })
    }

    pub fn init<R: Rng>(variant: BaselineVariant, cfg: HeadConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(variant, cfg)?;
        let n_in = cfg.k * cfg.k * cfg.channels;
        init_he(&mut p, &[("w1", n_in), ("w2", cfg.hidden)], rng);
        Ok(p)
    }

    pub fn forward(&self, input: &Grid) -> Result<BaselineOutput> {
        let HeadConfig { k, channels, .. } = self.cfg;
        if input.height != k || input.width != k || input.channels != channels {
            return Err(Error::ShapeMismatch {
                what: "roi feature",
                expected: k * k * channels,
                got: input.data.len(),
            });
        }
        let pre = dense(&input.data, &self.w1, &self.b1.data)?;
        let act = relu(&pre);
        let out = dense(&act, &self.w2, &self.b2.data)?;
        Ok(BaselineOutput {
            deltas: [out[0], out[1], out[2], out[3]],
            obj_logit: out[4],
            cache: BaselineCache { fingerprint: self.fingerprint(), input: input.data.clone(), pre, act },
        })
    }

    pub fn backward(&self, out: &BaselineOutput, g_deltas: &[f64; 4], g_obj: f64) -> Result<BaselineHeadParams> {
        let c = &out.cache;
        if c.fingerprint != self.fingerprint() {
            return Err(Error::StaleCache);
        }
        let g_out = [g_deltas[0], g_deltas[1], g_deltas[2], g_deltas[3], g_obj];
        let (g_act, g_w2, g_b2) = dense_backward(&c.act, &self.w2, &g_out)?;
        let g_pre = relu_backward(&c.pre, &g_act);
        let (_, g_w1, g_b1) = dense_backward(&c.input, &self.w1, &g_pre)?;
        Ok(BaselineHeadParams {
            variant: self.variant,
            cfg: self.cfg,
            w1: g_w1,
            b1: Tensor { shape: self.b1.shape.clone(), data: g_b1 },
            w2: g_w2,
            b2: Tensor { shape: self.b2.shape.clone(), data: g_b2 },
        })
    }
}
