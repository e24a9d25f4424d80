//! One joint optimization step over both stages, and the epoch loop.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ObjectnessMode, TrainConfig};
use super::{roi, Detector};
use crate::anchors::{assign, Label};
use crate::boxes::{decode, encode, iou, BBox, Delta};
use crate::error::{Error, Result};
use crate::losses::{
    improved_iou_loss, iou_pred_loss_mean, objectness_loss, per_sample_cls_loss, rcnn_reg_loss, total_loss, weighted_cls_loss,
    FocalConfig, LossComponents, ObjectnessNormalizer,
};
use crate::numcore::{clip_grad_norm, grad_norm, sgd_step, softmax, Grid};
use crate::postprocess::{select_proposals, GroundTruth};
use crate::reweighting::{br_weights, BrSample};
use crate::scalar::{ordered_sum, Scalar};
use crate::synthdata::Scene;

/// A positive anchor with its detached regression quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositiveAnchor<T> {
    pub anchor: usize,
    pub gt: BBox<T>,
    /// `IoU^eta` of the prediction when the plan was made.
    pub fiou_weight: T,
    /// IoU target of the IoU prediction.
    pub iou_target: T,
}

/// A second-stage training sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledRoi<T> {
    pub bbox: BBox<T>,
    /// Foreground class, or `num_classes` for background.
    pub label: usize,
    pub prior: T,
    pub reg_target: Option<Delta<T>>,
}

/// Every discrete or detached decision of one step. Re-evaluating the loss
/// under a fixed plan makes it a smooth function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan<T> {
    pub obj_anchors: Vec<(usize, u8)>,
    pub positives: Vec<PositiveAnchor<T>>,
    pub rois: Vec<SampledRoi<T>>,
    pub br_weights: Option<Vec<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    pub components: LossComponents<T>,
    pub total: T,
    pub br: Option<BrStats>,
    pub num_positives: usize,
    pub num_rois: usize,
    pub num_fg_rois: usize,
    /// Global gradient L2 norm before any clipping; zero until a step is taken.
    pub grad_norm: f64,
}

/// Splitmix-style mixer used to derive independent stream seeds.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random stream of step `step` of `epoch`; independent of everything that
/// happened before, so resumed runs replay exactly.
pub fn step_rng(seed: u64, epoch: usize, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, epoch as u64 + 1), step + 1))
}

fn order_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, epoch as u64 + 1), 0))
}

fn sample_sorted(rng: &mut ChaCha8Rng, pool: &[usize], n: usize) -> Vec<usize> {
    if n >= pool.len() {
        return pool.to_vec();
    }
    let mut picked: Vec<usize> = index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    picked
}

impl<T: Scalar> Detector<T> {
    fn make_rpn_plan(
        &self,
        fwd: &super::Forward<T>,
        gts: &[GroundTruth<T>],
        cfg: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<(usize, u8)>, Vec<PositiveAnchor<T>>)> {
        let gt_boxes: Vec<BBox<T>> = gts.iter().map(|g| g.bbox).collect();
        let assignment = assign(self.anchor_boxes(), &gt_boxes, &cfg.assign)?;
        let pos: Vec<usize> = (0..assignment.labels.len())
            .filter(|&i| assignment.labels[i] == Label::Positive)
            .collect();
        let neg: Vec<usize> = (0..assignment.labels.len())
            .filter(|&i| assignment.labels[i] == Label::Negative)
            .collect();
        let mut obj: Vec<(usize, u8)> = match cfg.objectness {
            ObjectnessMode::Focal { .. } => pos
                .iter()
                .map(|&i| (i, 1))
                .chain(neg.iter().map(|&i| (i, 0)))
                .collect(),
            ObjectnessMode::Sampled { batch, positive_fraction } => {
                let n_pos = ((batch as f64 * positive_fraction).round() as usize).min(pos.len());
                let n_neg = (batch - n_pos).min(neg.len());
                let p = sample_sorted(rng, &pos, n_pos);
                let n = sample_sorted(rng, &neg, n_neg);
                p.into_iter().map(|i| (i, 1)).chain(n.into_iter().map(|i| (i, 0))).collect()
            }
        };
        obj.sort_unstable();
        let eta = T::lit(cfg.fiou.eta);
        let positives = assignment
            .positives()
            .map(|(i, g)| {
                let (_, _, delta) = self.anchor_output(fwd, i);
                let pred = decode(&delta, &self.anchor_boxes()[i]);
                let g_iou = iou(&pred, &gt_boxes[g]);
                PositiveAnchor {
                    anchor: i,
                    gt: gt_boxes[g],
                    fiou_weight: g_iou.pow0(eta),
                    iou_target: g_iou,
                }
            })
            .collect();
        Ok((obj, positives))
    }

    fn make_roi_plan(
        &self,
        fwd: &super::Forward<T>,
        gts: &[GroundTruth<T>],
        cfg: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<SampledRoi<T>>> {
        let scored = self.scored_anchors(fwd);
        let w = T::from_usize_lossy(self.config.image_width);
        let h = T::from_usize_lossy(self.config.image_height);
        let proposals = select_proposals(&scored, w, h, &cfg.proposals);
        let thr = T::lit(cfg.roi.fg_iou_threshold);
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        let mut best_gt = vec![None; proposals.len()];
        for (k, p) in proposals.iter().enumerate() {
            let mut best: Option<(T, usize)> = None;
            for (g, gt) in gts.iter().enumerate() {
                let v = iou(&p.bbox, &gt.bbox);
                if best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, g));
                }
            }
            match best {
                Some((v, g)) if v >= thr => {
                    best_gt[k] = Some(g);
                    fg.push(k);
                }
                _ => bg.push(k),
            }
        }
        let quota = (cfg.roi.rois_per_scene as f64 * cfg.roi.positive_fraction).round() as usize;
        let fg = sample_sorted(rng, &fg, quota.min(fg.len()));
        let bg = sample_sorted(rng, &bg, (cfg.roi.rois_per_scene - fg.len()).min(bg.len()));
        let bg_label = self.config.num_classes;
        let mut rois = Vec::with_capacity(fg.len() + bg.len());
        for &k in &fg {
            let gt = &gts[best_gt[k].expect("foreground has a match")];
            rois.push(SampledRoi {
                bbox: proposals[k].bbox,
                label: gt.class_id,
                prior: proposals[k].prior,
                reg_target: Some(encode(&gt.bbox, &proposals[k].bbox)?),
            });
        }
        for &k in &bg {
            rois.push(SampledRoi {
                bbox: proposals[k].bbox,
                label: bg_label,
                prior: proposals[k].prior,
                reg_target: None,
            });
        }
        Ok(rois)
    }

    /// Zeroes the gradients, then evaluates the weighted total loss and
    /// accumulates its gradient into every parameter tensor. Decisions not in
    /// `plan` are drawn from `rng` and returned in the completed plan.
    pub fn loss_and_gradients(
        &mut self,
        image: &Grid<T>,
        gts: &[GroundTruth<T>],
        cfg: &TrainConfig,
        rng: &mut ChaCha8Rng,
        plan: Option<StepPlan<T>>,
    ) -> Result<(StepOutput<T>, StepPlan<T>)> {
        self.net.zero_grad();
        let fwd = self.forward(image)?;
        check_forward_finite(&fwd)?;
        let mut plan = match plan {
            Some(p) => p,
            None => {
                let (obj_anchors, positives) = self.make_rpn_plan(&fwd, gts, cfg, rng)?;
                let rois = self.make_roi_plan(&fwd, gts, cfg, rng)?;
                StepPlan { obj_anchors, positives, rois, br_weights: None }
            }
        };
        let lw = &cfg.weights;
        let a = self.net.anchors_per_cell;
        let mut d_obj: Vec<Grid<T>> = fwd.outputs.iter().map(|o| Grid::zeros(o.obj.height(), o.obj.width(), a)).collect();
        let mut d_iou: Vec<Option<Grid<T>>> = fwd
            .outputs
            .iter()
            .map(|o| o.iou.as_ref().map(|g| Grid::zeros(g.height(), g.width(), a)))
            .collect();
        let mut d_reg: Vec<Grid<T>> = fwd.outputs.iter().map(|o| Grid::zeros(o.reg.height(), o.reg.width(), 4 * a)).collect();
        let mut components = LossComponents::<T>::default();

        // objectness
        let probs: Vec<T> = plan.obj_anchors.iter().map(|&(i, _)| sigmoid_at(self, &fwd, i)).collect();
        let labels: Vec<u8> = plan.obj_anchors.iter().map(|&(_, y)| y).collect();
        let (focal, normalizer, scale) = match cfg.objectness {
            ObjectnessMode::Focal { focal, normalizer } => (focal, normalizer, T::one()),
            // alpha = 1/2 with gamma = 0 is half the binary cross entropy
            ObjectnessMode::Sampled { .. } => (FocalConfig { alpha: 0.5, gamma: 0.0 }, ObjectnessNormalizer::AllAnchors, T::lit(2.0)),
        };
        let obj = objectness_loss(&probs, &labels, &focal, normalizer)?;
        components.obj_rpn = obj.value * scale;
        let lam = T::lit(lw.obj_rpn) * scale;
        for ((&(i, _), &p), &g) in plan.obj_anchors.iter().zip(&probs).zip(&obj.grads) {
            let (level, cell, k) = self.locate(i);
            let v = &mut d_obj[level].cell_flat_mut(cell)[k];
            *v = *v + lam * g * p * (T::one() - p);
        }

        // localization and IoU prediction over positives
        let m = plan.positives.len();
        if m > 0 {
            let inv = T::one() / T::from_usize_lossy(m);
            let mut loc_values = Vec::with_capacity(m);
            let mut iou_pairs = Vec::with_capacity(m);
            let lam_loc = T::lit(lw.loc_rpn);
            for p in &plan.positives {
                let (_, iou_logit, delta) = self.anchor_output(&fwd, p.anchor);
                let l = improved_iou_loss(&delta, &p.gt, &self.anchor_boxes()[p.anchor])?;
                loc_values.push(p.fiou_weight * l.value);
                let (level, cell, k) = self.locate(p.anchor);
                let dst = &mut d_reg[level].cell_flat_mut(cell)[4 * k..4 * k + 4];
                for j in 0..4 {
                    dst[j] = dst[j] + lam_loc * p.fiou_weight * l.grad[j] * inv;
                }
                if let Some(z) = iou_logit {
                    iou_pairs.push((crate::numcore::sigmoid(z), p.iou_target));
                }
            }
            components.loc_rpn = ordered_sum(loc_values) * inv;
            if self.config.iou_branch {
                let b = iou_pred_loss_mean(&iou_pairs);
                components.iou_rpn = b.value;
                let lam_iou = T::lit(lw.iou_rpn);
                for ((p, &(g_hat, _)), &g) in plan.positives.iter().zip(&iou_pairs).zip(&b.grads) {
                    let (level, cell, k) = self.locate(p.anchor);
                    let grid = d_iou[level].as_mut().expect("branch present");
                    let v = &mut grid.cell_flat_mut(cell)[k];
                    *v = *v + lam_iou * g * g_hat * (T::one() - g_hat);
                }
            }
        }

        // second stage
        let mut d_q: Vec<Grid<T>> = fwd
            .features
            .q
            .iter()
            .map(|q| Grid::zeros(q.height(), q.width(), q.channels()))
            .collect();
        let mut br_stats = None;
        let num_fg = plan.rois.iter().filter(|r| r.reg_target.is_some()).count();
        if !plan.rois.is_empty() {
            let boxes: Vec<BBox<T>> = plan.rois.iter().map(|r| r.bbox).collect();
            let feats = self.roi_features(&fwd, &boxes)?;
            let (out, cache) = self.net.rcnn(&feats)?;
            let n = plan.rois.len();
            let probs: Vec<Vec<T>> = (0..n).map(|k| softmax(out.logits.cell_flat(k))).collect();
            let labels: Vec<usize> = plan.rois.iter().map(|r| r.label).collect();
            let weights = match &plan.br_weights {
                Some(w) => w.clone(),
                None => {
                    let w = match &cfg.br {
                        None => vec![T::one(); n],
                        Some(br) => {
                            let losses = per_sample_cls_loss(&probs, &labels, &cfg.cls_loss)?;
                            let samples: Vec<BrSample<T>> = plan
                                .rois
                                .iter()
                                .zip(&losses)
                                .map(|(r, &l)| BrSample {
                                    prior: r.prior,
                                    is_foreground: r.reg_target.is_some(),
                                    cls_loss: l,
                                })
                                .collect();
                            br_weights(&samples, br)?
                        }
                    };
                    plan.br_weights = Some(w.clone());
                    w
                }
            };
            if cfg.br.is_some() {
                let f: Vec<f64> = weights.iter().map(|w| w.as_f64()).collect();
                br_stats = Some(BrStats {
                    mean: f.iter().sum::<f64>() / f.len() as f64,
                    min: f.iter().copied().fold(f64::INFINITY, f64::min),
                    max: f.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                });
            }
            let cls = weighted_cls_loss(&probs, &labels, &weights, &cfg.cls_loss)?;
            components.cls = cls.value;
            let lam_cls = T::lit(lw.cls);
            let mut d_logits = Grid::zeros(n, 1, out.logits.channels());
            for (k, row) in cls.logit_grads.iter().enumerate() {
                for (d, &g) in d_logits.cell_flat_mut(k).iter_mut().zip(row) {
                    *d = lam_cls * g;
                }
            }
            let fg_rows: Vec<usize> = (0..n).filter(|&k| plan.rois[k].reg_target.is_some()).collect();
            let pairs: Vec<(Delta<T>, Delta<T>)> = fg_rows
                .iter()
                .map(|&k| (Delta::from_slice(out.deltas.cell_flat(k)), plan.rois[k].reg_target.expect("fg")))
                .collect();
            let reg = rcnn_reg_loss(&pairs);
            components.reg = reg.value;
            let lam_reg = T::lit(lw.reg);
            let mut d_deltas = Grid::zeros(n, 1, 4);
            for (&k, g) in fg_rows.iter().zip(&reg.grads) {
                for (d, &v) in d_deltas.cell_flat_mut(k).iter_mut().zip(g) {
                    *d = lam_reg * v;
                }
            }
            let d_feats = self.net.rcnn_backward(&cache, &d_logits, &d_deltas)?;
            for (k, b) in boxes.iter().enumerate() {
                let (l, stride) = self.roi_source(b);
                roi::roi_pool_backward(&mut d_q[l], b, stride, d_feats.cell_flat(k));
            }
        }
        let total = total_loss(&components, lw)?;

        for l in (0..fwd.outputs.len()).rev() {
            let d = self.net.rpn_level_backward(&fwd.heads[l], &d_obj[l], d_iou[l].as_ref(), &d_reg[l])?;
            d_q[l].add_assign(&d)?;
        }
        self.net.features_backward(&fwd.features, d_q)?;

        let out = StepOutput {
            components,
            total,
            br: br_stats,
            num_positives: m,
            num_rois: plan.rois.len(),
            num_fg_rois: num_fg,
            grad_norm: 0.0,
        };
        Ok((out, plan))
    }

    /// One SGD step on one scene at learning rate `lr`. Parameters are left
    /// untouched when any gradient is non-finite.
    pub fn train_step(
        &mut self,
        image: &Grid<T>,
        gts: &[GroundTruth<T>],
        cfg: &TrainConfig,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepOutput<T>> {
        let (mut out, _) = self.loss_and_gradients(image, gts, cfg, rng, None)?;
        for p in self.net.params() {
            let bad = p.grad_weights.iter().chain(&p.grad_biases).position(|g| !g.is_finite());
            if let Some(i) = bad {
                return Err(Error::training(p.name.clone(), format!("non-finite gradient at flat index {i}")));
            }
        }
        let sgd = cfg.sgd.with_learning_rate(lr);
        let mut params = self.net.params_mut();
        out.grad_norm = match sgd.max_grad_norm {
            Some(m) => clip_grad_norm(&mut params, m),
            None => grad_norm(&params),
        }
        .as_f64();
        for p in params {
            sgd_step(p, &sgd)?;
        }
        Ok(out)
    }
}

fn check_forward_finite<T: Scalar>(fwd: &super::Forward<T>) -> Result<()> {
    for (l, q) in fwd.features.q.iter().enumerate() {
        if !q.all_finite() {
            return Err(Error::training("features", format!("non-finite activation at level {l}")));
        }
    }
    for (l, out) in fwd.outputs.iter().enumerate() {
        let finite = out.obj.all_finite() && out.reg.all_finite() && out.iou.as_ref().is_none_or(|g| g.all_finite());
        if !finite {
            return Err(Error::training("rpn", format!("non-finite head output at level {l}")));
        }
    }
    Ok(())
}

fn sigmoid_at<T: Scalar>(det: &Detector<T>, fwd: &super::Forward<T>, i: usize) -> T {
    crate::numcore::sigmoid(det.anchor_output(fwd, i).0)
}

/// Training progress that a checkpoint records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    /// Steps completed over all epochs.
    pub global_step: u64,
}

/// Per-epoch means of the loss terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub components: LossComponents<f64>,
    pub weighted: LossComponents<f64>,
    pub total: f64,
    /// Mean / min / max second-stage weight; absent when reweighting is off.
    pub br_weights: Option<BrStats>,
    pub mean_positives: f64,
    pub mean_fg_rois: f64,
    /// Mean and max pre-clip gradient norm.
    pub mean_grad_norm: f64,
    pub max_grad_norm: f64,
    /// Per-step totals in visiting order.
    pub step_totals: Vec<f64>,
}

/// Runs epoch `state.epoch` over `scenes` and advances `state`.
pub fn train_epoch<T: Scalar>(
    det: &mut Detector<T>,
    scenes: &[&Scene],
    cfg: &TrainConfig,
    seed: u64,
    state: &mut TrainState,
) -> Result<EpochLog> {
    let epoch = state.epoch;
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut order_rng(seed, epoch));
    let mut sums = [0.0f64; 5];
    let mut totals = Vec::with_capacity(order.len());
    let (mut br_sum, mut br_min, mut br_max, mut br_n) = (0.0, f64::INFINITY, f64::NEG_INFINITY, 0usize);
    let (mut pos, mut fg) = (0usize, 0usize);
    let (mut gn_sum, mut gn_max) = (0.0f64, 0.0f64);
    let mut lr_first = None;
    for (k, &si) in order.iter().enumerate() {
        let scene = scenes[si];
        let lr = cfg.learning_rate(epoch, state.global_step);
        lr_first.get_or_insert(lr);
        let image: Grid<T> = scene.grid.cast();
        let gts: Vec<GroundTruth<T>> = scene
            .ground_truths
            .iter()
            .map(|g| GroundTruth { bbox: g.bbox.cast(), class_id: g.class_id })
            .collect();
        let mut rng = step_rng(seed, epoch, k as u64);
        let out = det.train_step(&image, &gts, cfg, lr, &mut rng).map_err(|e| match e {
            Error::Training { component, message } => Error::Training {
                component,
                message: format!("{message} (epoch {epoch}, step {k}, scene {si})"),
            },
            other => other,
        })?;
        for (s, (_, v)) in sums.iter_mut().zip(out.components.named()) {
            *s += v.as_f64();
        }
        totals.push(out.total.as_f64());
        if let Some(b) = out.br {
            br_sum += b.mean;
            br_min = br_min.min(b.min);
            br_max = br_max.max(b.max);
            br_n += 1;
        }
        pos += out.num_positives;
        fg += out.num_fg_rois;
        gn_sum += out.grad_norm;
        gn_max = gn_max.max(out.grad_norm);
        state.global_step += 1;
    }
    state.epoch += 1;
    let n = order.len().max(1) as f64;
    let mean = LossComponents {
        obj_rpn: sums[0] / n,
        loc_rpn: sums[1] / n,
        iou_rpn: sums[2] / n,
        reg: sums[3] / n,
        cls: sums[4] / n,
    };
    let w = &cfg.weights;
    let weighted = LossComponents {
        obj_rpn: mean.obj_rpn * w.obj_rpn,
        loc_rpn: mean.loc_rpn * w.loc_rpn,
        iou_rpn: mean.iou_rpn * w.iou_rpn,
        reg: mean.reg * w.reg,
        cls: mean.cls * w.cls,
    };
    Ok(EpochLog {
        epoch,
        learning_rate: lr_first.unwrap_or_else(|| cfg.learning_rate(epoch, state.global_step)),
        steps: order.len(),
        components: mean,
        weighted,
        total: totals.iter().sum::<f64>() / n,
        br_weights: (br_n > 0).then(|| BrStats { mean: br_sum / br_n as f64, min: br_min, max: br_max }),
        mean_positives: pos as f64 / n,
        mean_fg_rois: fg as f64 / n,
        mean_grad_norm: gn_sum / n,
        max_grad_norm: gn_max,
        step_totals: totals,
    })
}
