use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::{train_on, TrainConfig, TrainedHead};
use super::{gen_scenes, render_roi_feature, stream, tag, Scene, SceneConfig};
use crate::error::{Error, Result};
use crate::evalkit::{
    average_precision, displacement_stats, iou_improvement_stats, nms, positive_count_stats, rescoring_nms,
    Detection, DisplacementReport, IouBin, PositiveCount, RefinedImage, AP_METHOD, AP_THRESHOLDS,
    DISPLACEMENT_BINS, IOU_BINS,
};
use crate::geometry::{clip_to_image, iou, BBox};
use crate::losses::LossReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub eval_scenes: usize,
    pub nms_iou: f64,
    pub ap_thresholds: Vec<f64>,
    /// Thresholds of the positive-count table.
    pub count_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            eval_scenes: 500,
            nms_iou: 0.5,
            ap_thresholds: AP_THRESHOLDS.to_vec(),
            count_thresholds: vec![0.5, 0.6, 0.7, 0.8, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApRow {
    pub threshold: f64,
    pub plain: f64,
    pub rescored: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub train: TrainConfig,
    pub ap: Vec<ApRow>,
    pub mean_ap_plain: f64,
    pub mean_ap_rescored: f64,
    /// Over positive proposals (IoU >= 0.5 with their matched gt).
    pub mean_iou_before: f64,
    pub mean_iou_after: f64,
    pub iou_bins: Vec<IouBin>,
    pub positive_counts: Vec<PositiveCount>,
    pub degenerate_decodes: usize,
    pub loss_history: Vec<LossReport>,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantDelta {
    pub a: String,
    pub b: String,
    /// `a - b` per AP threshold, plain NMS.
    pub ap_plain: Vec<f64>,
    pub ap_rescored: Vec<f64>,
    pub mean_iou_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub ap_method: String,
    pub config_hash: String,
    pub scene: SceneConfig,
    pub eval: EvalConfig,
    pub variants: Vec<VariantReport>,
    pub deltas: Vec<VariantDelta>,
    /// Left-boundary displacement statistics of the evaluation positives.
    pub displacement: DisplacementReport,
}

impl BenchReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn variant(&self, name: &str) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.name == name)
    }
}

fn config_hash(scene: &SceneConfig, eval: &EvalConfig, variants: &[TrainConfig]) -> Result<String> {
    let blob = serde_json::to_vec(&(env!("CARGO_PKG_VERSION"), scene, eval, variants))?;
    Ok(hex::encode(Sha256::digest(&blob)))
}

struct RefinedScene {
    dets: Vec<Detection>,
    image: RefinedImage,
    degenerate: usize,
}

fn refine_scene(head: &TrainedHead, cfg: &TrainConfig, scene_cfg: &SceneConfig, si: usize, scene: &Scene) -> Result<RefinedScene> {
    let spec = cfg.feature_spec(scene_cfg.noise_std);
    let settings = cfg.loss_settings();
    let mut rng = stream(scene_cfg.seed, tag::EVAL_RENDER, 0, si as u64);
    let mut dets = Vec::with_capacity(scene.proposals.len());
    let mut refined = Vec::with_capacity(scene.proposals.len());
    let mut degenerate = 0;
    for (i, p) in scene.proposals.iter().enumerate() {
        let f = render_roi_feature(p, scene.render_target(i).as_ref(), &spec, &mut rng)?;
        let r = head.predict(&f, p, &settings)?;
        degenerate += r.degenerate as usize;
        let b = clip_to_image(&r.bbox, scene_cfg.image_w, scene_cfg.image_h);
        refined.push(b);
        dets.push(Detection::new(b, r.objectness, r.loc_confidence)?);
    }
    Ok(RefinedScene {
        dets,
        image: RefinedImage { proposals: scene.proposals.clone(), refined, gts: scene.gts.clone() },
        degenerate,
    })
}

fn refine_all(head: &TrainedHead, cfg: &TrainConfig, scene_cfg: &SceneConfig, scenes: &[Scene]) -> Result<Vec<RefinedScene>> {
    scenes.par_iter().enumerate().map(|(si, s)| refine_scene(head, cfg, scene_cfg, si, s)).collect()
}

/// Refines every proposal of `scenes` with `head`. Features come from the
/// evaluation noise stream, so the result matches what `compare` scores.
pub fn refine_scenes(head: &TrainedHead, cfg: &TrainConfig, scene_cfg: &SceneConfig, scenes: &[Scene]) -> Result<Vec<RefinedImage>> {
    Ok(refine_all(head, cfg, scene_cfg, scenes)?.into_iter().map(|r| r.image).collect())
}

fn evaluate(
    head: &TrainedHead,
    cfg: &TrainConfig,
    scene_cfg: &SceneConfig,
    eval: &EvalConfig,
    scenes: &[Scene],
    history: Vec<LossReport>,
) -> Result<VariantReport> {
    let images = refine_all(head, cfg, scene_cfg, scenes)?;
    let gts: Vec<Vec<BBox>> = scenes.iter().map(|s| s.gts.clone()).collect();
    let plain: Vec<Vec<Detection>> =
        images.iter().map(|i| nms(&i.dets, eval.nms_iou).into_iter().map(|j| i.dets[j]).collect()).collect();
    let rescored: Vec<Vec<Detection>> = images.iter().map(|i| rescoring_nms(&i.dets, eval.nms_iou).1).collect();
    let mut ap = Vec::new();
    for &t in &eval.ap_thresholds {
        ap.push(ApRow {
            threshold: t,
            plain: average_precision(&plain, &gts, t)?,
            rescored: average_precision(&rescored, &gts, t)?,
        });
    }
    let n_thr = ap.len().max(1) as f64;
    let degenerate_decodes = images.iter().map(|i| i.degenerate).sum();
    let refined: Vec<RefinedImage> = images.into_iter().map(|i| i.image).collect();
    let (mut before, mut after, mut n) = (0.0, 0.0, 0usize);
    for (s, r) in scenes.iter().zip(&refined) {
        for (i, m) in s.matches.iter().enumerate() {
            if let Some(g) = m.matched() {
                before += iou(&s.proposals[i], &s.gts[g]);
                after += iou(&r.refined[i], &s.gts[g]);
                n += 1;
            }
        }
    }
    let n = n.max(1) as f64;
    Ok(VariantReport {
        name: cfg.variant.name().to_string(),
        train: cfg.clone(),
        mean_ap_plain: ap.iter().map(|r| r.plain).sum::<f64>() / n_thr,
        mean_ap_rescored: ap.iter().map(|r| r.rescored).sum::<f64>() / n_thr,
        ap,
        mean_iou_before: before / n,
        mean_iou_after: after / n,
        iou_bins: iou_improvement_stats(&refined, &IOU_BINS)?,
        positive_counts: positive_count_stats(&refined, &eval.count_thresholds)?,
        degenerate_decodes,
        loss_history: history,
        checkpoint_hash: head.checkpoint().hash(),
    })
}

/// Trains every variant on the same training scenes and evaluates each on
/// the same evaluation scenes, with plain and rescoring NMS.
pub fn compare(variants: &[TrainConfig], scene_cfg: &SceneConfig, eval: &EvalConfig) -> Result<BenchReport> {
    let first = variants.first().ok_or_else(|| Error::InvalidArgument("no variants to compare".into()))?;
    for v in variants {
        v.validate()?;
        if v.seed != first.seed || v.train_scenes != first.train_scenes {
            return Err(Error::InvalidArgument("compared variants must share seed and training scenes".into()));
        }
    }
    scene_cfg.validate()?;
    let train_scenes = gen_scenes(scene_cfg, first.train_scenes, tag::TRAIN_SCENE)?;
    let eval_scenes = gen_scenes(scene_cfg, eval.eval_scenes, tag::EVAL_SCENE)?;
    let reports = variants
        .par_iter()
        .map(|cfg| {
            let out = train_on(cfg, scene_cfg, &train_scenes)?;
            evaluate(&out.head, cfg, scene_cfg, eval, &eval_scenes, out.history)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut deltas = Vec::new();
    for (i, a) in reports.iter().enumerate() {
        for b in &reports[i + 1..] {
            deltas.push(VariantDelta {
                a: a.name.clone(),
                b: b.name.clone(),
                ap_plain: a.ap.iter().zip(&b.ap).map(|(x, y)| x.plain - y.plain).collect(),
                ap_rescored: a.ap.iter().zip(&b.ap).map(|(x, y)| x.rescored - y.rescored).collect(),
                mean_iou_after: a.mean_iou_after - b.mean_iou_after,
            });
        }
    }
    let pairs: Vec<(BBox, BBox)> = eval_scenes
        .iter()
        .flat_map(|s| s.proposals.iter().zip(&s.matches).filter_map(|(p, m)| m.matched().map(|g| (*p, s.gts[g]))))
        .collect();
    let displacement = displacement_stats(&pairs, first.sigma, first.k, &DISPLACEMENT_BINS)?;
    Ok(BenchReport {
        ap_method: AP_METHOD.to_string(),
        config_hash: config_hash(scene_cfg, eval, variants)?,
        scene: scene_cfg.clone(),
        eval: eval.clone(),
        variants: reports,
        deltas,
        displacement,
    })
}

/// AP table as CSV: one row per variant, NMS mode and threshold.
pub fn report_csv(r: &BenchReport) -> String {
    let mut s = format!("# {}; config_hash={}\n", r.ap_method, r.config_hash);
    s += "variant,nms,threshold,ap\n";
    for v in &r.variants {
        for row in &v.ap {
            s += &format!("{},plain,{},{}\n", v.name, row.threshold, row.plain);
        }
        for row in &v.ap {
            s += &format!("{},rescoring,{},{}\n", v.name, row.threshold, row.rescored);
        }
    }
    s
}
