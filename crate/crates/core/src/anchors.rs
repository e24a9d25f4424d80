//! Multi-ratio, multi-scale anchor grids and IoU-threshold assignment.

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Anchor size and stride for one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelAnchorSpec {
    pub stride: f64,
    /// Side of the square anchor of multiplier 1, in image units.
    pub base_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    /// Width / height ratios.
    pub aspect_ratios: Vec<f64>,
    pub scale_multipliers: Vec<f64>,
    pub levels: Vec<LevelAnchorSpec>,
}

impl Default for AnchorConfig {
    /// Three levels at strides 8/16/32 with bases 8/16/32 and the nine
    /// shapes `{1:2, 1:1, 2:1} x {2^0, 2^(1/3), 2^(2/3)}`.
    fn default() -> Self {
        Self {
            aspect_ratios: vec![0.5, 1.0, 2.0],
            scale_multipliers: vec![1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)],
            levels: [8.0, 16.0, 32.0]
                .into_iter()
                .map(|s| LevelAnchorSpec { stride: s, base_size: s })
                .collect(),
        }
    }
}

impl AnchorConfig {
    /// Full-scale layout: bases 32..512 over strides 8..128.
    pub fn full_scale() -> Self {
        Self {
            levels: (3..=7)
                .map(|l| LevelAnchorSpec {
                    stride: f64::from(1u32 << l),
                    base_size: f64::from(1u32 << (l + 2)),
                })
                .collect(),
            ..Self::default()
        }
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.aspect_ratios.len() * self.scale_multipliers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: &f64| *v > 0.0 && v.is_finite();
        if self.aspect_ratios.is_empty() || !self.aspect_ratios.iter().all(positive) {
            return Err(Error::Config("aspect_ratios must be non-empty and positive".into()));
        }
        if self.scale_multipliers.is_empty() || !self.scale_multipliers.iter().all(positive) {
            return Err(Error::Config("scale_multipliers must be non-empty and positive".into()));
        }
        if self.levels.is_empty() {
            return Err(Error::Config("anchor config needs at least one level".into()));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if !positive(&l.stride) || !positive(&l.base_size) {
                return Err(Error::Config(format!("level {i}: stride and base_size must be positive")));
            }
        }
        Ok(())
    }

    /// `(width, height)` of every anchor shape of `level`, shape-index order.
    pub fn shapes(&self, level: usize) -> Vec<(f64, f64)> {
        let base = self.levels[level].base_size;
        let mut out = Vec::with_capacity(self.anchors_per_cell());
        for &ratio in &self.aspect_ratios {
            for &mult in &self.scale_multipliers {
                let side = base * mult;
                out.push((side * ratio.sqrt(), side / ratio.sqrt()));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor<T> {
    pub bbox: BBox<T>,
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub shape_index: usize,
}

/// Grid extent of one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelShape {
    pub height: usize,
    pub width: usize,
}

/// Tiles anchors over every level, ordered level-major, then row-major, then by shape.
pub fn generate<T: Scalar>(pyramid: &[LevelShape], config: &AnchorConfig) -> Result<Vec<Anchor<T>>> {
    config.validate()?;
    if pyramid.len() != config.levels.len() {
        return Err(Error::Config(format!(
            "{} pyramid levels but {} anchor levels configured",
            pyramid.len(),
            config.levels.len()
        )));
    }
    let total: usize = pyramid.iter().map(|l| l.height * l.width).sum::<usize>() * config.anchors_per_cell();
    let mut anchors = Vec::with_capacity(total);
    for (level, shape) in pyramid.iter().enumerate() {
        let stride = config.levels[level].stride;
        let shapes = config.shapes(level);
        for row in 0..shape.height {
            for col in 0..shape.width {
                let cx = (col as f64 + 0.5) * stride;
                let cy = (row as f64 + 0.5) * stride;
                for (shape_index, &(w, h)) in shapes.iter().enumerate() {
                    anchors.push(Anchor {
                        bbox: BBox::from_center(T::lit(cx), T::lit(cy), T::lit(w), T::lit(h)),
                        level,
                        row,
                        col,
                        shape_index,
                    });
                }
            }
        }
    }
    Ok(anchors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
    /// Max IoU between the negative and positive thresholds.
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignConfig {
    pub pos_threshold: f64,
    pub neg_threshold: f64,
    /// Additionally mark each ground truth's best anchor positive.
    pub force_match: bool,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self {
            pos_threshold: 0.5,
            neg_threshold: 0.5,
            force_match: false,
        }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.pos_threshold) || !unit.contains(&self.neg_threshold) {
            return Err(Error::Config("assignment thresholds must lie in [0, 1]".into()));
        }
        if self.pos_threshold < self.neg_threshold {
            return Err(Error::Config("pos_threshold must be >= neg_threshold".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment<T> {
    pub labels: Vec<Label>,
    /// Matched ground truth for positives.
    pub matched_gt: Vec<Option<usize>>,
    /// Best IoU over all ground truths; for force-matched anchors, the IoU with the claiming ground truth.
    pub matched_iou: Vec<T>,
}

impl<T: Scalar> Assignment<T> {
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.matched_gt
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.filter(|_| self.labels[i] == Label::Positive).map(|g| (i, g)))
    }

    pub fn num_positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == Label::Positive).count()
    }

    pub fn num_negatives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == Label::Negative).count()
    }
}

/// Labels anchors by their best IoU against `gts`; ties go to the lowest
/// ground-truth index.
pub fn assign<T: Scalar>(anchors: &[BBox<T>], gts: &[BBox<T>], cfg: &AssignConfig) -> Result<Assignment<T>> {
    cfg.validate()?;
    let pos = T::lit(cfg.pos_threshold);
    let neg = T::lit(cfg.neg_threshold);
    let n = anchors.len();
    let mut labels = vec![Label::Negative; n];
    let mut matched_gt = vec![None; n];
    let mut matched_iou = vec![T::zero(); n];
    if gts.is_empty() {
        return Ok(Assignment { labels, matched_gt, matched_iou });
    }
    let g_count = gts.len();
    let mut ious = vec![T::zero(); n * g_count];
    for (i, a) in anchors.iter().enumerate() {
        let row = &mut ious[i * g_count..(i + 1) * g_count];
        let mut best: Option<(T, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(a, gt);
            row[g] = v;
            if best.is_none_or(|(b, _)| v > b) {
                best = Some((v, g));
            }
        }
        let (v, g) = best.expect("non-empty gts");
        matched_iou[i] = v;
        if v >= pos {
            labels[i] = Label::Positive;
            matched_gt[i] = Some(g);
        } else if v >= neg {
            labels[i] = Label::Ignored;
        }
    }
    if cfg.force_match {
        // Each gt claims its best anchor not already claimed by an earlier gt.
        let mut claimed = vec![false; n];
        for g in 0..g_count {
            let mut best: Option<(T, usize)> = None;
            for i in (0..n).filter(|&i| !claimed[i]) {
                let v = ious[i * g_count + g];
                if best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, i));
                }
            }
            if let Some((v, i)) = best {
                claimed[i] = true;
                labels[i] = Label::Positive;
                matched_gt[i] = Some(g);
                matched_iou[i] = v;
            }
        }
    }
    Ok(Assignment { labels, matched_gt, matched_iou })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pyramid(dims: &[(usize, usize)]) -> Vec<LevelShape> {
        dims.iter().map(|&(height, width)| LevelShape { height, width }).collect()
    }

    #[test]
    fn count_is_cells_times_shapes() {
        let cfg = AnchorConfig {
            levels: vec![LevelAnchorSpec { stride: 8.0, base_size: 32.0 }],
            ..Default::default()
        };
        let a = generate::<f64>(&pyramid(&[(2, 2)]), &cfg).unwrap();
        assert_eq!(a.len(), 36);
        let a = generate::<f64>(&pyramid(&[(8, 8), (4, 4), (2, 2)]), &AnchorConfig::default()).unwrap();
        assert_eq!(a.len(), (64 + 16 + 4) * 9);
        assert_eq!(a[9].col, 1);
        assert_eq!(a[64 * 9].level, 1);
    }

    #[test]
    fn square_anchor_of_base_32() {
        let cfg = AnchorConfig {
            aspect_ratios: vec![1.0],
            scale_multipliers: vec![1.0],
            levels: vec![LevelAnchorSpec { stride: 8.0, base_size: 32.0 }],
        };
        let a = generate::<f64>(&pyramid(&[(1, 1)]), &cfg).unwrap();
        assert_eq!(a[0].bbox.width(), 32.0);
        assert_eq!(a[0].bbox.height(), 32.0);
        assert_eq!((a[0].bbox.cx(), a[0].bbox.cy()), (4.0, 4.0));
    }

    #[test]
    fn one_to_two_ratio_preserves_area() {
        let s = 16.0;
        let mult = 2f64.powf(1.0 / 3.0);
        let cfg = AnchorConfig {
            aspect_ratios: vec![0.5],
            scale_multipliers: vec![mult],
            levels: vec![LevelAnchorSpec { stride: 16.0, base_size: s }],
        };
        let b = generate::<f64>(&pyramid(&[(1, 1)]), &cfg).unwrap()[0].bbox;
        assert!((b.width() - s * mult / 2f64.sqrt()).abs() < 1e-12);
        assert!((b.height() - 2.0 * b.width()).abs() < 1e-12);
        assert!((b.area() - (s * mult).powi(2)).abs() < 1e-9);
    }

    #[test]
    fn level_mismatch_rejected() {
        assert!(generate::<f64>(&pyramid(&[(2, 2)]), &AnchorConfig::default()).is_err());
    }

    #[test]
    fn threshold_labels() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        // IoU 0.6 and 0.4 against gt
        let hi = BBox::new(0.0, 0.0, 10.0, 6.0).unwrap();
        let lo = BBox::new(0.0, 0.0, 10.0, 4.0).unwrap();
        let a = assign(&[hi, lo], &[gt], &AssignConfig::default()).unwrap();
        assert_eq!(a.labels, vec![Label::Positive, Label::Negative]);
        assert_eq!(a.matched_gt, vec![Some(0), None]);
        let empty = assign::<f64>(&[hi, lo], &[], &AssignConfig::default()).unwrap();
        assert!(empty.labels.iter().all(|&l| l == Label::Negative));
    }

    #[test]
    fn ties_break_to_lowest_gt() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let a = assign(&[gt], &[gt, gt], &AssignConfig::default()).unwrap();
        assert_eq!(a.matched_gt[0], Some(0));
    }

    #[test]
    fn force_match_covers_every_gt() {
        let anchors = vec![BBox::new(0.0, 0.0, 4.0, 4.0).unwrap(), BBox::new(20.0, 20.0, 24.0, 24.0).unwrap()];
        let gts = vec![BBox::new(1.0, 1.0, 9.0, 9.0).unwrap(), BBox::new(40.0, 40.0, 50.0, 50.0).unwrap()];
        let off = assign(&anchors, &gts, &AssignConfig::default()).unwrap();
        assert_eq!(off.num_positives(), 0);
        let on = assign(&anchors, &gts, &AssignConfig { force_match: true, ..Default::default() }).unwrap();
        let covered: Vec<usize> = on.positives().map(|(_, g)| g).collect();
        assert!(covered.contains(&0) && covered.contains(&1));
    }

    #[test]
    fn band_thresholds_produce_ignored() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let mid = BBox::new(0.0, 0.0, 10.0, 5.0).unwrap();
        let cfg = AssignConfig { pos_threshold: 0.7, neg_threshold: 0.3, force_match: false };
        assert_eq!(assign(&[mid], &[gt], &cfg).unwrap().labels[0], Label::Ignored);
        assert!(AssignConfig { pos_threshold: 0.2, neg_threshold: 0.3, force_match: false }.validate().is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox<f64>> {
        (0.0..64.0f64, 0.0..64.0f64, 2.0..30.0f64, 2.0..30.0f64).prop_map(|(x, y, w, h)| BBox::from_center(x, y, w, h))
    }

    proptest! {
        #[test]
        fn partition_and_permutation_invariance(
            anchors in prop::collection::vec(arb_box(), 1..30),
            gts in prop::collection::vec(arb_box(), 0..4),
            rot in 0usize..30,
        ) {
            let cfg = AssignConfig::default();
            let a = assign(&anchors, &gts, &cfg).unwrap();
            prop_assert_eq!(a.num_positives() + a.num_negatives(), anchors.len());
            let k = rot % anchors.len();
            let mut perm = anchors.clone();
            perm.rotate_left(k);
            let b = assign(&perm, &gts, &cfg).unwrap();
            for i in 0..anchors.len() {
                let j = (i + anchors.len() - k) % anchors.len();
                prop_assert_eq!(a.labels[i], b.labels[j]);
                prop_assert_eq!(a.matched_gt[i], b.matched_gt[j]);
            }
            if !gts.is_empty() && anchors.len() >= gts.len() {
                let f = assign(&anchors, &gts, &AssignConfig { force_match: true, ..cfg }).unwrap();
                for g in 0..gts.len() {
                    prop_assert!(f.positives().any(|(_, m)| m == g));
                }
            }
        }
    }
}
