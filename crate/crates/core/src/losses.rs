//! Training losses of the two-stage detector, each returning its value
//! together with the analytic gradient with respect to its predictions.
//!
//! All logs use probabilities clamped into `[PROB_EPSILON, 1 - PROB_EPSILON]`.
//! Batch losses reduce with left-to-right sums.

use serde::{Deserialize, Serialize};

use crate::boxes::{box_grad_to_delta, decode, encode, iou, iou_grad, BBox, Delta};
use crate::error::{Error, Result};
use crate::scalar::{ordered_sum, Scalar};

pub const PROB_EPSILON: f64 = 1e-12;

/// Row sums of class probabilities must be within this of 1.
pub const PROB_ROW_TOLERANCE: f64 = 1e-9;

#[inline]
pub fn clamp_prob<T: Scalar>(p: T) -> T {
    let eps = T::lit(PROB_EPSILON);
    p.max(eps).min(T::one() - eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("focal alpha must be in (0, 1), got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FiouConfig {
    /// Exponent of the IoU weight; 0 disables the weight.
    pub eta: f64,
}

impl Default for FiouConfig {
    fn default() -> Self {
        Self { eta: 2.0 }
    }
}

impl FiouConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be >= 0, got {}", self.eta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub obj_rpn: f64,
    pub loc_rpn: f64,
    pub iou_rpn: f64,
    pub reg: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            obj_rpn: 1.0,
            loc_rpn: 2.0,
            iou_rpn: 1.0,
            reg: 2.0,
            cls: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.obj_rpn, self.loc_rpn, self.iou_rpn, self.reg, self.cls];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// The five unweighted loss terms of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents<T> {
    pub obj_rpn: T,
    pub loc_rpn: T,
    pub iou_rpn: T,
    pub reg: T,
    pub cls: T,
}

impl<T: Scalar> LossComponents<T> {
    pub fn named(&self) -> [(&'static str, T); 5] {
        [
            ("obj_rpn", self.obj_rpn),
            ("loc_rpn", self.loc_rpn),
            ("iou_rpn", self.iou_rpn),
            ("reg", self.reg),
            ("cls", self.cls),
        ]
    }
}

/// `λ_obj L_obj + λ_loc L_loc + λ_iou L_iou + λ_reg L_reg + λ_cls L_cls`.
pub fn total_loss<T: Scalar>(components: &LossComponents<T>, weights: &LossWeights) -> Result<T> {
    for (name, v) in components.named() {
        if !v.is_finite() {
            return Err(Error::training(name, format!("non-finite loss component {v}")));
        }
    }
    Ok(T::lit(weights.obj_rpn) * components.obj_rpn
        + T::lit(weights.loc_rpn) * components.loc_rpn
        + T::lit(weights.iou_rpn) * components.iou_rpn
        + T::lit(weights.reg) * components.reg
        + T::lit(weights.cls) * components.cls)
}

/// Mean value of a batch loss with per-element gradients (already scaled by
/// the normalizer).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss<T> {
    pub value: T,
    pub grads: Vec<T>,
}

/// Focal loss of one binary prediction and its derivative with respect to `p_hat`.
pub fn focal_loss<T: Scalar>(p_hat: T, y: u8, cfg: &FocalConfig) -> Result<(T, T)> {
    let p = clamp_prob(p_hat);
    let alpha = T::lit(cfg.alpha);
    let gamma = T::lit(cfg.gamma);
    let one = T::one();
    match y {
        1 => {
            let q = one - p;
            let value = -alpha * q.pow0(gamma) * p.ln();
            let mut grad = -alpha * q.pow0(gamma) / p;
            if gamma != T::zero() {
                grad = grad + alpha * gamma * q.powf(gamma - one) * p.ln();
            }
            Ok((value, grad))
        }
        0 => {
            let q = one - p;
            let w = one - alpha;
            let value = -w * p.pow0(gamma) * q.ln();
            let mut grad = w * p.pow0(gamma) / q;
            if gamma != T::zero() {
                grad = grad - w * gamma * p.powf(gamma - one) * q.ln();
            }
            Ok((value, grad))
        }
        other => Err(Error::Input(format!("binary label must be 0 or 1, got {other}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectnessNormalizer {
    /// Mean over every anchor passed in.
    #[default]
    AllAnchors,
    /// Sum divided by `max(1, positives)`.
    Positives,
}

/// Mean focal loss over all anchors, with per-anchor `d/dp_hat`.
pub fn objectness_loss<T: Scalar>(
    p_hats: &[T],
    labels: &[u8],
    cfg: &FocalConfig,
    normalizer: ObjectnessNormalizer,
) -> Result<BatchLoss<T>> {
    if p_hats.len() != labels.len() {
        return Err(Error::Input(format!("{} predictions for {} labels", p_hats.len(), labels.len())));
    }
    if p_hats.is_empty() {
        log::warn!("objectness loss over an empty anchor set is defined as 0");
        return Ok(BatchLoss { value: T::zero(), grads: Vec::new() });
    }
    let denom = match normalizer {
        ObjectnessNormalizer::AllAnchors => p_hats.len(),
        ObjectnessNormalizer::Positives => labels.iter().filter(|&&y| y == 1).count().max(1),
    };
    let inv = T::one() / T::from_usize_lossy(denom);
    let mut values = Vec::with_capacity(p_hats.len());
    let mut grads = Vec::with_capacity(p_hats.len());
    for (&p, &y) in p_hats.iter().zip(labels) {
        let (v, g) = focal_loss(p, y, cfg)?;
        values.push(v);
        grads.push(g * inv);
    }
    Ok(BatchLoss {
        value: ordered_sum(values) * inv,
        grads,
    })
}

/// Value of a box-regression loss, its gradient with respect to the predicted
/// delta `(tx, ty, tw, th)`, and the IoU of the decoded prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxLoss<T> {
    pub value: T,
    pub grad: [T; 4],
    pub iou: T,
}

/// `1 - IoU(decode(pred), gt) + ||pred - encode(gt)||²`, all relative to `reference`.
///
/// The IoU term is differentiated through the decoded box.
pub fn improved_iou_loss<T: Scalar>(pred: &Delta<T>, gt: &BBox<T>, reference: &BBox<T>) -> Result<BoxLoss<T>> {
    let target = encode(gt, reference)?;
    let pred_box = decode(pred, reference);
    let g = iou(&pred_box, gt);
    let ig = box_grad_to_delta(&iou_grad(&pred_box, gt), pred, reference);
    let t_hat = pred.to_array();
    let t_star = target.to_array();
    let two = T::lit(2.0);
    let mut l2 = T::zero();
    let mut grad = [T::zero(); 4];
    for j in 0..4 {
        let d = t_hat[j] - t_star[j];
        l2 = l2 + d * d;
        grad[j] = two * d - ig[j];
    }
    Ok(BoxLoss {
        value: T::one() - g + l2,
        grad,
        iou: g,
    })
}

/// [`improved_iou_loss`] scaled by `IoU^eta`; the weight is not differentiated.
pub fn fast_iou_loss<T: Scalar>(
    pred: &Delta<T>,
    gt: &BBox<T>,
    reference: &BBox<T>,
    cfg: &FiouConfig,
) -> Result<BoxLoss<T>> {
    let base = improved_iou_loss(pred, gt, reference)?;
    let w = base.iou.pow0(T::lit(cfg.eta));
    Ok(BoxLoss {
        value: w * base.value,
        grad: base.grad.map(|g| w * g),
        iou: base.iou,
    })
}

/// One positive anchor for the localization loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocSample<T> {
    pub pred: Delta<T>,
    pub gt: BBox<T>,
    pub anchor: BBox<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocLoss<T> {
    pub value: T,
    /// Per-sample delta gradients, already divided by the sample count.
    pub grads: Vec<[T; 4]>,
    pub ious: Vec<T>,
}

/// Mean fast IoU loss over the positives; 0 when there are none.
pub fn loc_loss<T: Scalar>(samples: &[LocSample<T>], cfg: &FiouConfig) -> Result<LocLoss<T>> {
    if samples.is_empty() {
        return Ok(LocLoss { value: T::zero(), grads: Vec::new(), ious: Vec::new() });
    }
    let inv = T::one() / T::from_usize_lossy(samples.len());
    let mut values = Vec::with_capacity(samples.len());
    let mut grads = Vec::with_capacity(samples.len());
    let mut ious = Vec::with_capacity(samples.len());
    for s in samples {
        let l = fast_iou_loss(&s.pred, &s.gt, &s.anchor, cfg)?;
        values.push(l.value);
        grads.push(l.grad.map(|g| g * inv));
        ious.push(l.iou);
    }
    Ok(LocLoss {
        value: ordered_sum(values) * inv,
        grads,
        ious,
    })
}

/// Soft-target binary cross entropy of a predicted IoU and its derivative in `g_hat`.
pub fn iou_pred_loss<T: Scalar>(g_hat: T, g_target: T) -> (T, T) {
    let p = clamp_prob(g_hat);
    let g = g_target;
    let one = T::one();
    let value = -(g * p.ln() + (one - g) * (one - p).ln());
    let grad = -g / p + (one - g) / (one - p);
    (value, grad)
}

/// Mean of [`iou_pred_loss`] over `(g_hat, g_target)` pairs.
pub fn iou_pred_loss_mean<T: Scalar>(pairs: &[(T, T)]) -> BatchLoss<T> {
    if pairs.is_empty() {
        return BatchLoss { value: T::zero(), grads: Vec::new() };
    }
    let inv = T::one() / T::from_usize_lossy(pairs.len());
    let (values, grads): (Vec<T>, Vec<T>) = pairs
        .iter()
        .map(|&(p, g)| {
            let (v, d) = iou_pred_loss(p, g);
            (v, d * inv)
        })
        .unzip();
    BatchLoss {
        value: ordered_sum(values) * inv,
        grads,
    }
}

/// Mean over positives of `Σ_j |pred_j - target_j|`; subgradient 0 at ties.
pub fn rcnn_reg_loss<T: Scalar>(pairs: &[(Delta<T>, Delta<T>)]) -> LocLoss<T> {
    if pairs.is_empty() {
        return LocLoss { value: T::zero(), grads: Vec::new(), ious: Vec::new() };
    }
    let inv = T::one() / T::from_usize_lossy(pairs.len());
    let mut values = Vec::with_capacity(pairs.len());
    let mut grads = Vec::with_capacity(pairs.len());
    for (pred, target) in pairs {
        let (p, t) = (pred.to_array(), target.to_array());
        let mut v = T::zero();
        let mut g = [T::zero(); 4];
        for j in 0..4 {
            let d = p[j] - t[j];
            v = v + d.abs();
            g[j] = if d > T::zero() {
                inv
            } else if d < T::zero() {
                -inv
            } else {
                T::zero()
            };
        }
        values.push(v);
        grads.push(g);
    }
    LocLoss {
        value: ordered_sum(values) * inv,
        grads,
        ious: Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ClsLossKind {
    #[default]
    CrossEntropy,
    /// Softmax focal loss `-α (1 - p_t)^γ log p_t`.
    Focal { alpha: f64, gamma: f64 },
}

/// Classification loss with its gradient with respect to the logits that
/// produced the probability rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsLoss<T> {
    pub value: T,
    pub logit_grads: Vec<Vec<T>>,
    /// Unweighted per-sample losses.
    pub per_sample: Vec<T>,
}

fn check_rows<T: Scalar>(probs: &[Vec<T>], labels: &[usize]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(Error::Input(format!("{} probability rows for {} labels", probs.len(), labels.len())));
    }
    let tol = T::lit(PROB_ROW_TOLERANCE);
    for (k, (row, &label)) in probs.iter().zip(labels).enumerate() {
        if label >= row.len() {
            return Err(Error::Input(format!("row {k}: label {label} out of {} classes", row.len())));
        }
        let s = ordered_sum(row.iter().copied());
        if (s - T::one()).abs() > tol {
            return Err(Error::Input(format!("row {k}: probabilities sum to {s}")));
        }
    }
    Ok(())
}

/// Per-sample classification losses for `kind`.
pub fn per_sample_cls_loss<T: Scalar>(probs: &[Vec<T>], labels: &[usize], kind: &ClsLossKind) -> Result<Vec<T>> {
    check_rows(probs, labels)?;
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(row, &label)| sample_loss(row[label], kind))
        .collect())
}

fn sample_loss<T: Scalar>(p_t: T, kind: &ClsLossKind) -> T {
    let p = clamp_prob(p_t);
    match *kind {
        ClsLossKind::CrossEntropy => -p.ln(),
        ClsLossKind::Focal { alpha, gamma } => -T::lit(alpha) * (T::one() - p).pow0(T::lit(gamma)) * p.ln(),
    }
}

/// `d loss / d p_t` of one sample.
fn sample_loss_dp<T: Scalar>(p_t: T, kind: &ClsLossKind) -> T {
    let p = clamp_prob(p_t);
    match *kind {
        ClsLossKind::CrossEntropy => -T::one() / p,
        ClsLossKind::Focal { alpha, gamma } => {
            let (a, g) = (T::lit(alpha), T::lit(gamma));
            let q = T::one() - p;
            let mut d = -a * q.pow0(g) / p;
            if g != T::zero() {
                d = d + a * g * q.powf(g - T::one()) * p.ln();
            }
            d
        }
    }
}

/// `(1/K) Σ_k w_k · loss_k` over softmax rows; weights are constants.
pub fn weighted_cls_loss<T: Scalar>(
    probs: &[Vec<T>],
    labels: &[usize],
    weights: &[T],
    kind: &ClsLossKind,
) -> Result<ClsLoss<T>> {
    if weights.len() != probs.len() {
        return Err(Error::Input(format!("{} weights for {} samples", weights.len(), probs.len())));
    }
    let per_sample = per_sample_cls_loss(probs, labels, kind)?;
    if probs.is_empty() {
        return Ok(ClsLoss { value: T::zero(), logit_grads: Vec::new(), per_sample });
    }
    let inv = T::one() / T::from_usize_lossy(probs.len());
    let value = ordered_sum(per_sample.iter().zip(weights).map(|(&l, &w)| w * l)) * inv;
    let logit_grads = probs
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((row, &label), &w)| {
            let p_t = row[label];
            // d p_t / d z_j = p_t (δ_jt - p_j)
            let scale = w * inv * sample_loss_dp(p_t, kind) * p_t;
            row.iter()
                .enumerate()
                .map(|(j, &p_j)| {
                    let delta = if j == label { T::one() } else { T::zero() };
                    scale * (delta - p_j)
                })
                .collect()
        })
        .collect();
    Ok(ClsLoss { value, logit_grads, per_sample })
}

/// Weighted cross entropy; the ω = 0 / all-ones weighting is the plain mean.
pub fn weighted_ce_loss<T: Scalar>(probs: &[Vec<T>], labels: &[usize], weights: &[T]) -> Result<ClsLoss<T>> {
    weighted_cls_loss(probs, labels, weights, &ClsLossKind::CrossEntropy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::activations::softmax;
    use crate::numcore::gradcheck::{finite_diff_check, DEFAULT_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-4;

    #[test]
    fn focal_reference_values() {
        let cfg = FocalConfig::default();
        let (v, _) = focal_loss(0.5f64, 1, &cfg).unwrap();
        assert!((v - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((v - 0.0433217).abs() < 1e-7);
        let (v, _) = focal_loss(1.0f64, 1, &cfg).unwrap();
        assert!(v < 1e-20);
        assert!(matches!(focal_loss(0.5f64, 2, &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        let cfg = FocalConfig { alpha: 0.5, gamma: 0.0 };
        for p in [0.1, 0.37, 0.9f64] {
            assert_eq!(focal_loss(p, 1, &cfg).unwrap().0, -0.5 * p.ln());
            assert_eq!(focal_loss(p, 0, &cfg).unwrap().0, -0.5 * (1.0 - p).ln());
        }
    }

    #[test]
    fn focal_gradient_at_point_three() {
        for y in [0, 1] {
            for gamma in [0.0, 0.5, 2.0] {
                let cfg = FocalConfig { alpha: 0.25, gamma };
                let (_, g) = focal_loss(0.3f64, y, &cfg).unwrap();
                let r = finite_diff_check(|x: &[f64]| focal_loss(x[0], y, &cfg).unwrap().0, &[0.3], &[g], DEFAULT_STEP)
                    .unwrap();
                assert!(r.max_relative_error <= TOL, "y={y} gamma={gamma} {r:?}");
            }
        }
    }

    #[test]
    fn focal_monotone_in_p() {
        let cfg = FocalConfig::default();
        let mut prev = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 1..100 {
            let p = i as f64 / 100.0;
            let pos = focal_loss(p, 1, &cfg).unwrap().0;
            let neg = focal_loss(p, 0, &cfg).unwrap().0;
            assert!(pos < prev.0 && neg > prev.1);
            prev = (pos, neg);
        }
    }

    #[test]
    fn objectness_mean_composition() {
        let cfg = FocalConfig::default();
        let a = focal_loss(0.5f64, 1, &cfg).unwrap().0;
        let b = focal_loss(0.2f64, 0, &cfg).unwrap().0;
        let l = objectness_loss(&[0.5, 0.2], &[1, 0], &cfg, ObjectnessNormalizer::AllAnchors).unwrap();
        assert!((l.value - (a + b) / 2.0).abs() < 1e-15);
        let single = objectness_loss(&[0.5], &[1], &cfg, ObjectnessNormalizer::AllAnchors).unwrap();
        assert_eq!(single.value, a);
        let perfect = objectness_loss(&[1.0, 0.0], &[1, 0], &cfg, ObjectnessNormalizer::AllAnchors).unwrap();
        assert!(perfect.value < 1e-20);
        let empty = objectness_loss::<f64>(&[], &[], &cfg, ObjectnessNormalizer::AllAnchors).unwrap();
        assert_eq!(empty.value, 0.0);
        let by_pos = objectness_loss(&[0.5, 0.2], &[1, 0], &cfg, ObjectnessNormalizer::Positives).unwrap();
        assert!((by_pos.value - (a + b)).abs() < 1e-15);
    }

    fn anchor() -> BBox<f64> {
        BBox::from_center(20.0, 20.0, 10.0, 10.0)
    }

    #[test]
    fn iou_losses_vanish_at_perfect_prediction() {
        let a = anchor();
        let z = Delta::zero();
        assert!(improved_iou_loss(&z, &a, &a).unwrap().value.abs() < 1e-15);
        assert!(fast_iou_loss(&z, &a, &a, &FiouConfig::default()).unwrap().value.abs() < 1e-15);
        let gt = BBox::from_center(22.0, 19.0, 12.0, 8.0);
        let t = encode(&gt, &a).unwrap();
        assert!(improved_iou_loss(&t, &gt, &a).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn disjoint_prediction_values() {
        let a = anchor();
        let gt = BBox::from_center(22.0, 20.0, 10.0, 10.0);
        let pred = Delta::new(3.0, 0.0, 0.0, 0.0); // center 50: disjoint from gt
        let l = improved_iou_loss(&pred, &gt, &a).unwrap();
        let t = encode(&gt, &a).unwrap();
        let expect = 1.0 + (3.0 - t.tx).powi(2) + t.ty.powi(2) + t.tw.powi(2) + t.th.powi(2);
        assert!((l.value - expect).abs() < 1e-12 && l.value > 1.0);
        let f = fast_iou_loss(&pred, &gt, &a, &FiouConfig { eta: 2.0 }).unwrap();
        assert_eq!(f.value, 0.0);
        assert_eq!(f.grad, [0.0; 4]);
    }

    #[test]
    fn eta_zero_is_improved_loss_exactly() {
        let a = anchor();
        let gt = BBox::from_center(23.0, 18.0, 14.0, 9.0);
        let pred = Delta::new(0.1, -0.05, 0.2, -0.1);
        let i = improved_iou_loss(&pred, &gt, &a).unwrap();
        let f = fast_iou_loss(&pred, &gt, &a, &FiouConfig { eta: 0.0 }).unwrap();
        assert_eq!(i, f);
        let f2 = fast_iou_loss(&pred, &gt, &a, &FiouConfig { eta: 2.0 }).unwrap();
        assert!(f2.value <= i.value);
    }

    #[test]
    fn loc_loss_composition() {
        let a = anchor();
        let gt = BBox::from_center(23.0, 18.0, 14.0, 9.0);
        let perfect = LocSample { pred: Delta::zero(), gt: a, anchor: a };
        let known = LocSample { pred: Delta::new(0.1, 0.0, 0.0, 0.1), gt, anchor: a };
        let cfg = FiouConfig::default();
        let one = loc_loss(&[known], &cfg).unwrap().value;
        let two = loc_loss(&[perfect, known], &cfg).unwrap().value;
        assert!((two - one / 2.0).abs() < 1e-15);
        assert_eq!(loc_loss::<f64>(&[], &cfg).unwrap().value, 0.0);
    }

    #[test]
    fn iou_pred_minimum_and_gradient() {
        let (v, g) = iou_pred_loss(0.5f64, 0.5);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(g.abs() < 1e-15);
        assert!(iou_pred_loss(1.0f64, 1.0).0 < 1e-11);
        let (_, g) = iou_pred_loss(0.8f64, 0.5);
        let r = finite_diff_check(|x: &[f64]| iou_pred_loss(x[0], 0.5).0, &[0.8], &[g], DEFAULT_STEP).unwrap();
        assert!(r.max_relative_error <= TOL);
    }

    #[test]
    fn l1_regression_cases() {
        let t = Delta::<f64>::new(0.1, -0.2, 0.3, 0.0);
        assert_eq!(rcnn_reg_loss(&[(t, t)]).value, 0.0);
        let p = Delta::new(0.2, -0.2, 0.3, 0.0);
        let l = rcnn_reg_loss(&[(p, t)]);
        assert!((l.value - 0.1).abs() < 1e-15);
        assert_eq!(l.grads[0], [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn weighted_ce_cases() {
        let probs = vec![vec![0.7, 0.2, 0.1], vec![0.25, 0.5, 0.25]];
        let labels = [0, 2];
        let plain = weighted_ce_loss(&probs, &labels, &[1.0, 1.0]).unwrap();
        let ce = [-(0.7f64).ln(), -(0.25f64).ln()];
        assert!((plain.value - (ce[0] + ce[1]) / 2.0).abs() < 1e-15);
        let w = weighted_ce_loss(&probs, &labels, &[0.5, 1.5]).unwrap();
        assert!((w.value - (0.5 * ce[0] + 1.5 * ce[1]) / 2.0).abs() < 1e-15);
        let perfect = weighted_ce_loss(&[vec![1.0, 0.0]], &[0], &[1.0]).unwrap();
        assert!(perfect.value < 1e-11);
        assert!(matches!(weighted_ce_loss(&probs, &labels, &[1.0]), Err(Error::Input(_))));
        assert!(weighted_ce_loss(&[vec![0.5, 0.4]], &[0], &[1.0]).is_err());
    }

    #[test]
    fn cls_gradients_through_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in [ClsLossKind::CrossEntropy, ClsLossKind::Focal { alpha: 0.25, gamma: 2.0 }] {
            for _ in 0..20 {
                let logits: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
                let label = rng.random_range(0..4);
                let w = rng.random_range(0.2..2.0);
                let l = weighted_cls_loss(&[softmax(&logits)], &[label], &[w], &kind).unwrap();
                let r = finite_diff_check(
                    |z: &[f64]| weighted_cls_loss(&[softmax(z)], &[label], &[w], &kind).unwrap().value,
                    &logits,
                    &l.logit_grads[0],
                    DEFAULT_STEP,
                )
                .unwrap();
                assert!(r.max_relative_error <= TOL, "{kind:?} {r:?}");
            }
        }
    }

    #[test]
    fn total_loss_weighting() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossComponents::<f64>::default(), &w).unwrap(), 0.0);
        let ones = LossComponents { obj_rpn: 1.0, loc_rpn: 1.0, iou_rpn: 1.0, reg: 1.0, cls: 1.0 };
        assert_eq!(total_loss(&ones, &w).unwrap(), 8.0);
        let bumped = LossComponents { reg: 3.0, ..ones };
        assert_eq!(total_loss(&bumped, &w).unwrap() - 8.0, 2.0 * 2.0);
        let bad = LossComponents { cls: f64::NAN, ..ones };
        assert!(matches!(total_loss(&bad, &w), Err(Error::Training { ref component, .. }) if component == "cls"));
    }
}
