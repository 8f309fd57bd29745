//! Prediction heads: the side-aware bucketing head, the two direct regression
//! baselines, rescoring and the momentum SGD optimizer.

mod baseline;
mod objective;
mod sabl;

pub use baseline::{
    baseline_decode, baseline_encode, BaselineCache, BaselineHeadParams, BaselineOutput, BaselineVariant,
};
pub use objective::{gradcheck_head, GroupCheck, Head, HeadLoss, LossSettings, Refined, Sample};
pub use sabl::{SablCache, SablHeadParams, SablOutput, SideGrads};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::{ParamSet, Tensor};

/// Shape hyperparameters shared by every head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Buckets per side; also the RoI grid size.
    pub k: usize,
    /// Input feature channels.
    pub channels: usize,
    /// Channels after the per-pixel input layer.
    pub feat_channels: usize,
    /// Width of the 1-D side features and of the baseline hidden layer.
    pub hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { k: 7, channels: 8, feat_channels: 4, hidden: 16 }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.channels == 0 || self.feat_channels == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument(format!("invalid head shape {self:?}")));
        }
        Ok(())
    }
}

/// Score used to rank detections after bucketing-guided rescoring.
pub fn rescore(cls_prob: f64, loc_confidence: f64) -> f64 {
    cls_prob * loc_confidence
}

/// He-normal weights for the listed tensors, zeros for everything else.
pub(crate) fn init_he<P: ParamSet, R: Rng>(p: &mut P, weights: &[(&str, usize)], rng: &mut R) {
    for (name, t) in p.tensors_mut() {
        let Some((_, fan_in)) = weights.iter().find(|(n, _)| *n == name) else {
            t.data.fill(0.0);
            continue;
        };
        let normal = Normal::new(0.0, (2.0 / *fan_in as f64).sqrt()).expect("finite std");
        t.data.iter_mut().for_each(|v| *v = normal.sample(rng));
    }
}

/// SGD with classic momentum: `v <- mu v + g`, `theta <- theta - lr v`.
#[derive(Debug, Clone)]
pub struct Sgd<P: ParamSet> {
    pub lr: f64,
    pub momentum: f64,
    velocity: P,
}

impl<P: ParamSet> Sgd<P> {
    pub fn new(params: &P, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("need lr > 0 and momentum in [0, 1), got {lr}, {momentum}")));
        }
        Ok(Self { lr, momentum, velocity: params.zeros_like() })
    }

    pub fn step(&mut self, params: &mut P, grads: &P) -> Result<()> {
        if grads.num_params() != params.num_params() {
            return Err(Error::ShapeMismatch {
                what: "gradient",
                expected: params.num_params(),
                got: grads.num_params(),
            });
        }
        let gs = grads.tensors();
        for ((_, v), (_, g)) in self.velocity.tensors_mut().into_iter().zip(gs) {
            let Tensor { data, .. } = v;
            data.iter_mut().zip(&g.data).for_each(|(v, g)| *v = self.momentum * *v + g);
        }
        params.add_scaled(&self.velocity, -self.lr);
        Ok(())
    }

    pub fn velocity(&self) -> &P {
        &self.velocity
    }
}
