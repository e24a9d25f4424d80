//! Greedy NMS, first-stage proposal selection, and COCO-style AP.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::boxes::{clip, decode, iou, BBox, Delta};
use crate::error::{Error, Result};
use crate::fusion::{self, ScoreTriple};
use crate::scalar::Scalar;

/// Upper bound on second-stage proposals at inference.
pub const INFERENCE_MAX_PROPOSALS: usize = 256;

/// Detections scoring below this are dropped before NMS.
pub const SCORE_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize + Copy", deserialize = "T: Deserialize<'de> + Copy"))]
pub struct Detection<T> {
    pub bbox: BBox<T>,
    pub class_id: usize,
    pub score: ScoreTriple<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize + Copy", deserialize = "T: Deserialize<'de> + Copy"))]
pub struct GroundTruth<T> {
    pub bbox: BBox<T>,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmsConfig {
    /// Boxes overlapping a kept box by more than this are suppressed.
    pub iou_threshold: f64,
    pub max_keep: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            max_keep: 100,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::Config(format!("nms iou_threshold {} outside [0, 1]", self.iou_threshold)));
        }
        Ok(())
    }
}

/// Indices sorted by descending score; equal scores keep index order.
pub fn rank_desc<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression.
///
/// With `classes` given, suppression only happens between boxes of the same
/// class and `max_keep` applies per class; otherwise it is class-agnostic.
/// Returns kept indices in descending score order.
pub fn nms<T: Scalar>(boxes: &[BBox<T>], scores: &[T], classes: Option<&[usize]>, cfg: &NmsConfig) -> Vec<usize> {
    let thr = T::lit(cfg.iou_threshold);
    let order = rank_desc(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut kept: Vec<usize> = Vec::new();
    let mut per_class_count: Vec<usize> = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        let class = classes.map_or(0, |c| c[i]);
        if per_class_count.len() <= class {
            per_class_count.resize(class + 1, 0);
        }
        if per_class_count[class] >= cfg.max_keep {
            continue;
        }
        per_class_count[class] += 1;
        kept.push(i);
        for &j in &order[pos + 1..] {
            if suppressed[j] || classes.is_some_and(|c| c[j] != class) {
                continue;
            }
            if iou(&boxes[i], &boxes[j]) > thr {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// Per-class NMS over detections ranked by their fused score.
pub fn nms_detections<T: Scalar>(dets: &[Detection<T>], cfg: &NmsConfig) -> Vec<Detection<T>> {
    let boxes: Vec<BBox<T>> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<T> = dets.iter().map(|d| d.score.fused).collect();
    let classes: Vec<usize> = dets.iter().map(|d| d.class_id).collect();
    nms(&boxes, &scores, Some(&classes), cfg)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// First-stage output for one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredAnchor<T> {
    pub anchor: BBox<T>,
    pub level: usize,
    pub delta: Delta<T>,
    pub objectness: T,
    pub iou_pred: T,
}

/// A decoded first-stage box with its scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize + Copy", deserialize = "T: Deserialize<'de> + Copy"))]
pub struct Proposal<T> {
    pub bbox: BBox<T>,
    pub objectness: T,
    pub iou_pred: T,
    /// `sqrt(iou_pred * objectness)`.
    pub prior: T,
    pub anchor_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    /// Candidates kept per level before NMS.
    pub pre_nms_top_n: usize,
    pub nms_threshold: f64,
    pub post_nms_top_n: usize,
    /// Minimum clipped side length.
    pub min_size: f64,
}

impl ProposalConfig {
    pub fn training() -> Self {
        Self {
            pre_nms_top_n: 1000,
            nms_threshold: 0.7,
            post_nms_top_n: 512,
            min_size: 1e-3,
        }
    }

    pub fn inference() -> Self {
        Self {
            post_nms_top_n: INFERENCE_MAX_PROPOSALS,
            ..Self::training()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(Error::Config("proposal nms_threshold outside [0, 1]".into()));
        }
        if self.min_size < 0.0 {
            return Err(Error::Config("proposal min_size must be >= 0".into()));
        }
        Ok(())
    }
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self::inference()
    }
}

/// Ranks anchors by prior, keeps the top `pre_nms_top_n` per level, decodes
/// and clips them, drops degenerate boxes, applies class-agnostic NMS and
/// keeps the best `post_nms_top_n`.
pub fn select_proposals<T: Scalar>(
    scored: &[ScoredAnchor<T>],
    image_w: T,
    image_h: T,
    cfg: &ProposalConfig,
) -> Vec<Proposal<T>> {
    let priors: Vec<T> = scored.iter().map(|s| fusion::prior(s.objectness, s.iou_pred)).collect();
    let order = rank_desc(&priors);
    let mut taken_per_level: Vec<usize> = Vec::new();
    let min_size = T::lit(cfg.min_size);
    let mut candidates: Vec<Proposal<T>> = Vec::new();
    for i in order {
        let s = &scored[i];
        if taken_per_level.len() <= s.level {
            taken_per_level.resize(s.level + 1, 0);
        }
        if taken_per_level[s.level] >= cfg.pre_nms_top_n {
            continue;
        }
        taken_per_level[s.level] += 1;
        let clipped = clip(&decode(&s.delta, &s.anchor), image_w, image_h);
        if clipped.degenerate || clipped.bbox.width() < min_size || clipped.bbox.height() < min_size {
            continue;
        }
        candidates.push(Proposal {
            bbox: clipped.bbox,
            objectness: s.objectness,
            iou_pred: s.iou_pred,
            prior: priors[i],
            anchor_index: i,
        });
    }
    // candidates are in prior order already
    let boxes: Vec<BBox<T>> = candidates.iter().map(|p| p.bbox).collect();
    let scores: Vec<T> = candidates.iter().map(|p| p.prior).collect();
    let nms_cfg = NmsConfig {
        iou_threshold: cfg.nms_threshold,
        max_keep: cfg.post_nms_top_n,
    };
    nms(&boxes, &scores, None, &nms_cfg)
        .into_iter()
        .map(|k| candidates[k])
        .collect()
}

/// IoU thresholds `0.50, 0.55, ..., 0.95`.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Evaluation input for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneResult<T> {
    pub detections: Vec<Detection<T>>,
    pub ground_truths: Vec<GroundTruth<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    /// Mean over IoU thresholds and classes with ground truth.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `(class id, AP averaged over thresholds)`.
    pub per_class: Vec<(usize, f64)>,
}

/// Precision/recall after each score-ranked detection of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

fn classes_with_gt<T: Scalar>(scenes: &[SceneResult<T>]) -> Vec<usize> {
    let set: BTreeSet<usize> = scenes
        .iter()
        .flat_map(|s| s.ground_truths.iter().map(|g| g.class_id))
        .collect();
    set.into_iter().collect()
}

/// Greedy COCO matching of one class at one IoU threshold, then the
/// cumulative precision/recall curve over all scenes.
pub fn pr_curve<T: Scalar>(scenes: &[SceneResult<T>], class_id: usize, iou_threshold: f64) -> PrCurve {
    let thr = T::lit(iou_threshold);
    let mut n_gt = 0usize;
    // (score, scene, det index, is_tp)
    let mut marks: Vec<(T, usize, usize, bool)> = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        let gts: Vec<&BBox<T>> = scene
            .ground_truths
            .iter()
            .filter(|g| g.class_id == class_id)
            .map(|g| &g.bbox)
            .collect();
        n_gt += gts.len();
        let dets: Vec<(usize, &Detection<T>)> = scene
            .detections
            .iter()
            .enumerate()
            .filter(|(_, d)| d.class_id == class_id)
            .collect();
        let scores: Vec<T> = dets.iter().map(|(_, d)| d.score.fused).collect();
        let mut matched = vec![false; gts.len()];
        for k in rank_desc(&scores) {
            let (di, det) = dets[k];
            let mut best: Option<(T, usize)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if matched[g] {
                    continue;
                }
                let v = iou(&det.bbox, gt);
                if v >= thr && best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, g));
                }
            }
            if let Some((_, g)) = best {
                matched[g] = true;
            }
            marks.push((det.score.fused, si, di, best.is_some()));
        }
    }
    marks.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(marks.len());
    let mut precision = Vec::with_capacity(marks.len());
    for (k, m) in marks.iter().enumerate() {
        tp += m.3 as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 });
    }
    PrCurve { recall, precision }
}

/// 101-point interpolated AP: at each recall level, the maximum precision
/// at that recall or beyond.
pub fn interpolated_ap(curve: &PrCurve) -> f64 {
    let mut prec = curve.precision.clone();
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = curve.recall.partition_point(|&x| x < level);
        if idx < prec.len() {
            total += prec[idx];
        }
    }
    total / 101.0
}

fn class_ap<T: Scalar>(scenes: &[SceneResult<T>], class_id: usize, thr: f64) -> f64 {
    interpolated_ap(&pr_curve(scenes, class_id, thr))
}

/// COCO-style AP over `iou_thresholds`, plus AP at 0.5 and 0.75.
pub fn coco_ap<T: Scalar>(scenes: &[SceneResult<T>], iou_thresholds: &[f64]) -> ApSummary {
    let classes = classes_with_gt(scenes);
    if classes.is_empty() || iou_thresholds.is_empty() {
        return ApSummary { ap: 0.0, ap50: 0.0, ap75: 0.0, per_class: Vec::new() };
    }
    let per_class: Vec<(usize, f64)> = classes
        .iter()
        .map(|&c| {
            let s: f64 = iou_thresholds.iter().map(|&t| class_ap(scenes, c, t)).sum();
            (c, s / iou_thresholds.len() as f64)
        })
        .collect();
    let n = classes.len() as f64;
    let at = |t: f64| classes.iter().map(|&c| class_ap(scenes, c, t)).sum::<f64>() / n;
    ApSummary {
        ap: per_class.iter().map(|(_, v)| v).sum::<f64>() / n,
        ap50: at(0.5),
        ap75: at(0.75),
        per_class,
    }
}
