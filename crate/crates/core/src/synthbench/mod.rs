//! Synthetic scenes, geometry-derived RoI features, training and the variant
//! comparison.
//!
//! Every random draw comes from a ChaCha8 stream keyed by `(seed, tag, index)`,
//! so results do not depend on evaluation order or thread count.

mod bench;
mod train;

pub use bench::{compare, refine_scenes, report_csv, ApRow, BenchReport, EvalConfig, VariantDelta, VariantReport};
pub use train::{build_samples, train, TrainConfig, TrainOutcome, TrainedHead, Variant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bucketing::{assign_proposals, best_match, Assignment};
use crate::error::{Error, Result};
use crate::geometry::{clip_to_image, iou, scale_about_center, BBox};
use crate::ndmath::Grid;

/// IoU at or above which a proposal is a positive.
pub const POS_IOU: f64 = 0.5;
/// IoU below which a proposal is background.
pub const NEG_IOU: f64 = 0.3;

const MAX_TRIES: usize = 100;

/// Stream tags keep the random streams of different stages apart.
pub mod tag {
    pub const TRAIN_SCENE: u64 = 1;
    pub const EVAL_SCENE: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const RENDER: u64 = 5;
    pub const EVAL_RENDER: u64 = 6;
    pub const SAMPLE: u64 = 7;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for stream `(seed, tag, a, b)`.
pub fn stream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed) ^ tag) ^ a).wrapping_add(splitmix(b)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub image_w: f64,
    pub image_h: f64,
    pub objects_per_scene: usize,
    pub size_range: (f64, f64),
    /// Per-coordinate jitter std, relative to the box size on that axis.
    pub proposal_jitter: f64,
    pub proposals_per_object: usize,
    pub distractors_per_scene: usize,
    /// Std of the noise channels (and of every channel on background RoIs).
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_w: 256.0,
            image_h: 256.0,
            objects_per_scene: 2,
            size_range: (24.0, 96.0),
            proposal_jitter: 0.15,
            proposals_per_object: 4,
            distractors_per_scene: 8,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range;
        let ok = self.image_w > 0.0
            && self.image_h > 0.0
            && lo > 0.0
            && lo <= hi
            && hi <= self.image_w.min(self.image_h)
            && self.proposal_jitter >= 0.0
            && self.noise_std >= 0.0
            && self.proposal_jitter.is_finite()
            && self.noise_std.is_finite();
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid scene config {self:?}")));
        }
        Ok(())
    }
}

/// Ground truth and proposals of one synthetic image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub gts: Vec<BBox>,
    pub proposals: Vec<BBox>,
    pub matches: Vec<Assignment>,
}

impl Scene {
    /// Ground truth a proposal's feature is rendered against: its max-IoU
    /// gt unless the proposal is background.
    pub fn render_target(&self, i: usize) -> Option<BBox> {
        match best_match(&self.proposals[i], &self.gts) {
            Some((g, v)) if v >= NEG_IOU => Some(self.gts[g]),
            _ => None,
        }
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let s: Scene = serde_json::from_str(line)?;
        if s.matches.len() != s.proposals.len() {
            return Err(Error::ShapeMismatch { what: "scene matches", expected: s.proposals.len(), got: s.matches.len() });
        }
        Ok(s)
    }
}

fn uniform_box<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> BBox {
    let (lo, hi) = cfg.size_range;
    let w = if lo < hi { rng.random_range(lo..hi) } else { lo };
    let h = if lo < hi { rng.random_range(lo..hi) } else { lo };
    let x = rng.random_range(0.0..=cfg.image_w - w);
    let y = rng.random_range(0.0..=cfg.image_h - h);
    BBox { x1: x, y1: y, x2: x + w, y2: y + h }
}

/// Samples one scene: objects uniformly placed, jittered positives kept
/// once their IoU reaches 0.5 (up to 100 tries), uniform distractors.
pub fn gen_scene<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> Result<Scene> {
    cfg.validate()?;
    let gts: Vec<BBox> = (0..cfg.objects_per_scene).map(|_| uniform_box(cfg, rng)).collect();
    let mut proposals = Vec::new();
    for g in &gts {
        let (w, h) = (g.width(), g.height());
        let nx = Normal::new(0.0, cfg.proposal_jitter * w).expect("finite std");
        let ny = Normal::new(0.0, cfg.proposal_jitter * h).expect("finite std");
        for _ in 0..cfg.proposals_per_object {
            for _ in 0..MAX_TRIES {
                let (a, b, c, d) = (nx.sample(rng), ny.sample(rng), nx.sample(rng), ny.sample(rng));
                let Ok(p) = BBox::new(g.x1 + a, g.y1 + b, g.x2 + c, g.y2 + d) else { continue };
                let p = clip_to_image(&p, cfg.image_w, cfg.image_h);
                if p.has_area() && iou(&p, g) >= POS_IOU {
                    proposals.push(p);
                    break;
                }
            }
        }
    }
    for _ in 0..cfg.distractors_per_scene {
        proposals.push(uniform_box(cfg, rng));
    }
    let matches = assign_proposals(&proposals, &gts, POS_IOU, NEG_IOU)?;
    Ok(Scene { gts, proposals, matches })
}

/// Scenes `0..n` of the stream selected by `tag`.
pub fn gen_scenes(cfg: &SceneConfig, n: usize, tag: u64) -> Result<Vec<Scene>> {
    (0..n).map(|i| gen_scene(cfg, &mut stream(cfg.seed, tag, i as u64, 0))).collect()
}

/// Shape of the rendered RoI feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub sigma: f64,
    pub k: usize,
    pub channels: usize,
    pub noise_std: f64,
}

/// RoI feature on a `k x k` grid of points spanning the `sigma`-scaled
/// proposal. Channels 0-3 hold signed distances from each point to
/// `gt.x1, gt.x2, gt.y1, gt.y2`, divided by the proposal width (X) or height
/// (Y). Other channels are noise. Without a target every channel is noise.
pub fn render_roi_feature<R: Rng>(proposal: &BBox, gt: Option<&BBox>, spec: &FeatureSpec, rng: &mut R) -> Result<Grid> {
    let FeatureSpec { sigma, k, channels, noise_std } = *spec;
    if channels < 5 || k == 0 {
        return Err(Error::InvalidArgument(format!("need k >= 1 and at least 5 channels, got {k} and {channels}")));
    }
    if !proposal.has_area() {
        return Err(Error::DegenerateProposal);
    }
    let region = scale_about_center(proposal, sigma)?;
    let (pw, ph) = (proposal.width(), proposal.height());
    let step_x = region.width() / k as f64;
    let step_y = region.height() / k as f64;
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut data = Vec::with_capacity(k * k * channels);
    for y in 0..k {
        let py = region.y1 + (y as f64 + 0.5) * step_y;
        for x in 0..k {
            let px = region.x1 + (x as f64 + 0.5) * step_x;
            let first = match gt {
                Some(g) => {
                    data.extend([(px - g.x1) / pw, (px - g.x2) / pw, (py - g.y1) / ph, (py - g.y2) / ph]);
                    4
                }
                None => 0,
            };
            for _ in first..channels {
                data.push(if noise_std > 0.0 { noise.sample(rng) } else { 0.0 });
            }
        }
    }
    Grid::from_vec(k, k, channels, data)
}
