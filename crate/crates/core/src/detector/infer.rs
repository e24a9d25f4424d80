use super::config::{InferenceConfig, ScoreMode};
use super::Detector;
use crate::boxes::{clip, decode, Delta};
use crate::error::Result;
use crate::fusion::{fuse, ScoreTriple};
use crate::numcore::{softmax, Grid};
use crate::postprocess::{coco_ap, coco_iou_thresholds, nms_detections, select_proposals, ApSummary, Detection, GroundTruth, SceneResult};
use crate::scalar::Scalar;
use crate::synthdata::Scene;

impl<T: Scalar> Detector<T> {
    /// Proposals, second-stage scoring, score floor and per-class NMS.
    pub fn infer(&self, image: &Grid<T>, cfg: &InferenceConfig) -> Result<Vec<Detection<T>>> {
        let fwd = self.forward(image)?;
        let scored = self.scored_anchors(&fwd);
        let w = T::from_usize_lossy(self.config.image_width);
        let h = T::from_usize_lossy(self.config.image_height);
        let proposals = select_proposals(&scored, w, h, &cfg.proposals);
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let boxes: Vec<_> = proposals.iter().map(|p| p.bbox).collect();
        let feats = self.roi_features(&fwd, &boxes)?;
        let (out, _) = self.net.rcnn(&feats)?;
        let floor = T::lit(cfg.score_floor);
        let c = self.config.num_classes;
        let mut dets = Vec::new();
        for (k, p) in proposals.iter().enumerate() {
            let probs = softmax(out.logits.cell_flat(k));
            let refined = clip(&decode(&Delta::from_slice(out.deltas.cell_flat(k)), &p.bbox), w, h);
            if refined.degenerate {
                continue;
            }
            let mut push = |class_id: usize, score: ScoreTriple<T>| {
                if score.fused >= floor {
                    dets.push(Detection { bbox: refined.bbox, class_id, score });
                }
            };
            match cfg.score_mode {
                ScoreMode::Fused => {
                    for (cls_id, &s) in probs.iter().take(c).enumerate() {
                        push(cls_id, ScoreTriple::with_rank_score(p.prior, s, fuse(p.prior, s)));
                    }
                }
                ScoreMode::ClsOnly => {
                    for (cls_id, &s) in probs.iter().take(c).enumerate() {
                        push(cls_id, ScoreTriple::with_rank_score(p.prior, s, s));
                    }
                }
                ScoreMode::PriorOnly => {
                    let best = (0..c).fold(0, |b, j| if probs[j] > probs[b] { j } else { b });
                    push(best, ScoreTriple::with_rank_score(p.prior, probs[best], p.prior));
                }
            }
        }
        Ok(nms_detections(&dets, &cfg.nms))
    }
}

/// Runs inference on every scene and scores it with COCO-style AP.
pub fn evaluate<T: Scalar>(
    det: &Detector<T>,
    scenes: &[&Scene],
    cfg: &InferenceConfig,
) -> Result<(ApSummary, Vec<SceneResult<T>>)> {
    let mut results = Vec::with_capacity(scenes.len());
    for s in scenes {
        let detections = det.infer(&s.grid.cast(), cfg)?;
        let ground_truths = s
            .ground_truths
            .iter()
            .map(|g| GroundTruth { bbox: g.bbox.cast(), class_id: g.class_id })
            .collect();
        results.push(SceneResult { detections, ground_truths });
    }
    Ok((coco_ap(&results, &coco_iou_thresholds()), results))
}
