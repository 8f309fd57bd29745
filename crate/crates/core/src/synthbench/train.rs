use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gen_scenes, render_roi_feature, stream, tag, FeatureSpec, Scene, SceneConfig};
use crate::bucketing::{Assignment, TargetDesign};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::head::{
    BaselineHeadParams, BaselineVariant, Head, HeadConfig, LossSettings, Refined, Sample, SablHeadParams, Sgd,
};
use crate::losses::{LossReport, LossWeights};
use crate::ndmath::{Checkpoint, Grid, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    Sabl,
    BboxReg,
    BoundaryReg,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Sabl => "SABL",
            Variant::BboxReg => "BBOX_REG",
            Variant::BoundaryReg => "BOUNDARY_REG",
        }
    }

    fn baseline(self) -> Option<BaselineVariant> {
        match self {
            Variant::Sabl => None,
            Variant::BboxReg => Some(BaselineVariant::BboxReg),
            Variant::BoundaryReg => Some(BaselineVariant::BoundaryReg),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "SABL" => Ok(Variant::Sabl),
            "BBOX_REG" => Ok(Variant::BboxReg),
            "BOUNDARY_REG" => Ok(Variant::BoundaryReg),
            _ => Err(Error::InvalidArgument(format!("unknown variant {s}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub sigma: f64,
    pub k: usize,
    pub channels: usize,
    pub feat_channels: usize,
    pub hidden: usize,
    pub lambda2: f64,
    pub beta: f64,
    pub use_ignore: bool,
    pub use_top2: bool,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub train_scenes: usize,
    /// Fraction of background proposals kept per epoch; positives are
    /// always kept.
    pub background_keep: f64,
    /// Baseline delta normalization.
    pub target_std: [f64; 4],
}

impl Default for TrainConfig {
    fn default() -> Self {
        let head = HeadConfig::default();
        let loss = LossSettings::default();
        Self {
            variant: Variant::Sabl,
            sigma: loss.sigma,
            k: head.k,
            channels: head.channels,
            feat_channels: head.feat_channels,
            hidden: head.hidden,
            lambda2: loss.weights.lambda2,
            beta: loss.beta,
            use_ignore: true,
            use_top2: true,
            lr: 0.01,
            momentum: 0.9,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            train_scenes: 2000,
            background_keep: 1.0,
            target_std: loss.target_std,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.background_keep) {
            return Err(Error::InvalidArgument(format!("background_keep must lie in [0, 1], got {}", self.background_keep)));
        }
        if !(self.sigma >= 1.0) || self.channels < 5 || !(self.beta > 0.0) || self.target_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument(format!("invalid train config {self:?}")));
        }
        self.head_config().validate()?;
        LossWeights::new(self.lambda2)?;
        Ok(())
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig { k: self.k, channels: self.channels, feat_channels: self.feat_channels, hidden: self.hidden }
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            sigma: self.sigma,
            design: TargetDesign { use_ignore: self.use_ignore, use_top2: self.use_top2 },
            beta: self.beta,
            weights: LossWeights { lambda1: 0.0, lambda2: self.lambda2 },
            target_std: self.target_std,
        }
    }

    pub fn feature_spec(&self, noise_std: f64) -> FeatureSpec {
        FeatureSpec { sigma: self.sigma, k: self.k, channels: self.channels, noise_std }
    }
}

/// A trained head of any variant.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedHead {
    Sabl(SablHeadParams),
    Baseline(BaselineHeadParams),
}

impl TrainedHead {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = stream(cfg.seed, tag::INIT, 0, 0);
        Ok(match cfg.variant.baseline() {
            None => TrainedHead::Sabl(SablHeadParams::init(cfg.head_config(), &mut rng)?),
            Some(v) => TrainedHead::Baseline(BaselineHeadParams::init(v, cfg.head_config(), &mut rng)?),
        })
    }

    pub fn predict(&self, feature: &Grid, proposal: &BBox, s: &LossSettings) -> Result<Refined> {
        match self {
            TrainedHead::Sabl(p) => p.predict(feature, proposal, s),
            TrainedHead::Baseline(p) => p.predict(feature, proposal, s),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        match self {
            TrainedHead::Sabl(p) => p.to_checkpoint(),
            TrainedHead::Baseline(p) => p.to_checkpoint(),
        }
    }

    /// Loads a checkpoint whose kind names the variant.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let variant: Variant = ckpt.kind.parse()?;
        let mut head = TrainedHead::init(&TrainConfig { variant, ..cfg.clone() })?;
        match &mut head {
            TrainedHead::Sabl(p) => p.load_checkpoint(ckpt)?,
            TrainedHead::Baseline(p) => p.load_checkpoint(ckpt)?,
        }
        Ok(head)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: TrainedHead,
    /// One row per epoch.
    pub history: Vec<LossReport>,
}

/// Training samples of every scene: positives carry their matched gt,
/// background carries none, ignored proposals are left out. Features are
/// rendered with the noise stream `(seed, tag, epoch, scene)`; background
/// subsampling draws from its own stream.
pub fn build_samples(
    scenes: &[Scene],
    spec: &FeatureSpec,
    seed: u64,
    stream_tag: u64,
    epoch: u64,
    background_keep: f64,
) -> Result<Vec<Sample>> {
    let per_scene = scenes
        .par_iter()
        .enumerate()
        .map(|(si, scene)| {
            let mut rng = stream(seed, stream_tag, epoch, si as u64);
            let mut keep_rng = stream(seed, tag::SAMPLE, epoch, si as u64);
            let mut out = Vec::new();
            for (i, (p, m)) in scene.proposals.iter().zip(&scene.matches).enumerate() {
                let gt = match m {
                    Assignment::Ignored => continue,
                    Assignment::Matched(g) => Some(scene.gts[*g]),
                    Assignment::Background if background_keep < 1.0 && keep_rng.random::<f64>() >= background_keep => {
                        continue
                    }
                    Assignment::Background => None,
                };
                let feature = render_roi_feature(p, scene.render_target(i).as_ref(), spec, &mut rng)?;
                out.push(Sample { feature, proposal: *p, gt });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

fn run<H: Head>(mut params: H, cfg: &TrainConfig, scenes: &[Scene], spec: &FeatureSpec) -> Result<(H, Vec<LossReport>)> {
    let settings = cfg.loss_settings();
    let mut history = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok((params, history));
    }
    let mut opt = Sgd::new(&params, cfg.lr, cfg.momentum)?;
    for epoch in 0..cfg.epochs {
        let samples = build_samples(scenes, spec, cfg.seed, tag::RENDER, epoch as u64, cfg.background_keep)?;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut stream(cfg.seed, tag::SHUFFLE, epoch as u64, 0));
        let mut acc = LossReport::default();
        let mut n_batches = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let l = params.loss(&batch, &settings, true)?;
            if !l.report.total.is_finite() {
                return Err(Error::Divergence { epoch, step, loss: l.report.total });
            }
            opt.step(&mut params, &l.grads.expect("requested"))?;
            if !params.all_finite() {
                return Err(Error::Divergence { epoch, step, loss: f64::NAN });
            }
            let r = l.report;
            acc.cls += r.cls;
            acc.bucketing += r.bucketing;
            acc.reg += r.reg;
            acc.total += r.total;
            acc.n_cls += r.n_cls;
            acc.n_bucketing += r.n_bucketing;
            acc.n_reg += r.n_reg;
            n_batches += 1;
        }
        let inv = 1.0 / n_batches.max(1) as f64;
        acc.cls *= inv;
        acc.bucketing *= inv;
        acc.reg *= inv;
        acc.total *= inv;
        history.push(acc);
    }
    Ok((params, history))
}

/// Trains one head on `scenes`.
pub fn train_on(cfg: &TrainConfig, scene_cfg: &SceneConfig, scenes: &[Scene]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = cfg.feature_spec(scene_cfg.noise_std);
    let (head, history) = match TrainedHead::init(cfg)? {
        TrainedHead::Sabl(p) => {
            let (p, h) = run(p, cfg, scenes, &spec)?;
            (TrainedHead::Sabl(p), h)
        }
        TrainedHead::Baseline(p) => {
            let (p, h) = run(p, cfg, scenes, &spec)?;
            (TrainedHead::Baseline(p), h)
        }
    };
    Ok(TrainOutcome { head, history })
}

/// Generates `cfg.train_scenes` training scenes and trains one head.
pub fn train(cfg: &TrainConfig, scene_cfg: &SceneConfig) -> Result<TrainOutcome> {
    let scenes = gen_scenes(scene_cfg, cfg.train_scenes, tag::TRAIN_SCENE)?;
    train_on(cfg, scene_cfg, &scenes)
}
