use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorConfig, AssignConfig};
use crate::error::{Error, Result};
use crate::losses::{ClsLossKind, FiouConfig, FocalConfig, LossWeights, ObjectnessNormalizer};
use crate::numcore::SgdConfig;
use crate::postprocess::{NmsConfig, ProposalConfig, SCORE_FLOOR};
use crate::reweighting::BrConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidConfig {
    /// Backbone levels, each half the resolution of the previous.
    pub levels: usize,
    /// Additional top levels produced from strided maps of the last level.
    pub extra_levels: usize,
    pub channels: usize,
    pub head_depth: usize,
    pub norm_groups: usize,
    /// Stride of the finest level relative to the input grid.
    pub stride: usize,
    /// Each stride x stride patch is averaged over a `patch_grid x patch_grid`
    /// sub-block layout before the stem.
    pub patch_grid: usize,
    /// Neighbouring patches within this Chebyshev radius are appended to
    /// each cell at `context_grid` resolution; 0 disables the context.
    pub context_radius: usize,
    pub context_grid: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            extra_levels: 0,
            channels: 16,
            head_depth: 4,
            norm_groups: 4,
            stride: 8,
            patch_grid: 4,
            context_radius: 1,
            context_grid: 2,
        }
    }
}

impl PyramidConfig {
    pub fn total_levels(&self) -> usize {
        self.levels + self.extra_levels
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.head_depth == 0 || self.channels == 0 {
            return Err(Error::Config("pyramid needs levels, head_depth and channels >= 1".into()));
        }
        if self.norm_groups == 0 || self.channels % self.norm_groups != 0 {
            return Err(Error::Config(format!(
                "{} channels not divisible into {} norm groups",
                self.channels, self.norm_groups
            )));
        }
        if self.patch_grid == 0 || self.stride == 0 || self.stride % self.patch_grid != 0 {
            return Err(Error::Config("stride must be a positive multiple of patch_grid".into()));
        }
        if self.context_radius > 0 && (self.context_grid == 0 || self.stride % self.context_grid != 0) {
            return Err(Error::Config("stride must be a positive multiple of context_grid".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiSampleConfig {
    pub rois_per_scene: usize,
    pub positive_fraction: f64,
    pub fg_iou_threshold: f64,
}

impl Default for RoiSampleConfig {
    fn default() -> Self {
        Self {
            rois_per_scene: 256,
            positive_fraction: 0.25,
            fg_iou_threshold: 0.5,
        }
    }
}

impl RoiSampleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.positive_fraction > 0.0 && self.positive_fraction <= 1.0) {
            return Err(Error::Config("positive_fraction must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.fg_iou_threshold) {
            return Err(Error::Config("fg_iou_threshold must lie in [0, 1]".into()));
        }
        if self.rois_per_scene == 0 {
            return Err(Error::Config("rois_per_scene must be >= 1".into()));
        }
        Ok(())
    }
}

/// Architecture and input geometry. Everything a checkpoint must agree on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    pub pyramid: PyramidConfig,
    pub anchors: AnchorConfig,
    /// Hidden width of the two fully connected second-stage layers.
    pub fc_dim: usize,
    /// With the branch off the IoU prediction is replaced by the objectness,
    /// so the prior reduces to the objectness.
    pub iou_branch: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            input_channels: 8,
            num_classes: 3,
            pyramid: PyramidConfig::default(),
            anchors: AnchorConfig::default(),
            fc_dim: 128,
            iou_branch: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        self.anchors.validate()?;
        if self.num_classes == 0 || self.input_channels == 0 || self.fc_dim == 0 {
            return Err(Error::Config("num_classes, input_channels and fc_dim must be >= 1".into()));
        }
        if self.anchors.levels.len() != self.pyramid.total_levels() {
            return Err(Error::Config(format!(
                "{} anchor levels for {} pyramid levels",
                self.anchors.levels.len(),
                self.pyramid.total_levels()
            )));
        }
        let shapes = self.level_shapes()?;
        for (l, spec) in self.anchors.levels.iter().enumerate() {
            let stride = self.pyramid.stride << l;
            if (spec.stride - stride as f64).abs() > 1e-9 {
                return Err(Error::Config(format!("anchor level {l} has stride {} but the pyramid has {stride}", spec.stride)));
            }
            if shapes[l].height == 0 || shapes[l].width == 0 {
                return Err(Error::Config(format!("pyramid level {l} is empty")));
            }
        }
        Ok(())
    }

    /// Spatial extent of every pyramid level; errors unless each level nests 2x in the previous.
    pub fn level_shapes(&self) -> Result<Vec<crate::anchors::LevelShape>> {
        let s = self.pyramid.stride;
        if self.image_height % s != 0 || self.image_width % s != 0 {
            return Err(Error::Config(format!(
                "{}x{} input not divisible by stride {s}",
                self.image_height, self.image_width
            )));
        }
        let (mut h, mut w) = (self.image_height / s, self.image_width / s);
        let mut out = Vec::with_capacity(self.pyramid.total_levels());
        for l in 0..self.pyramid.total_levels() {
            if l > 0 {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Config(format!("level {} of size {h}x{w} does not nest 2x", l - 1)));
                }
                h /= 2;
                w /= 2;
            }
            out.push(crate::anchors::LevelShape { height: h, width: w });
        }
        Ok(out)
    }

    pub fn patch_dim(&self) -> usize {
        let p = &self.pyramid;
        let own = p.patch_grid * p.patch_grid * self.input_channels;
        if p.context_radius == 0 {
            return own;
        }
        let side = 2 * p.context_radius + 1;
        own + (side * side - 1) * p.context_grid * p.context_grid * self.input_channels
    }

    pub fn roi_dim(&self) -> usize {
        4 * self.pyramid.channels
    }
}

/// How first-stage objectness is supervised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ObjectnessMode {
    /// Focal loss over every assigned anchor.
    Focal {
        focal: FocalConfig,
        normalizer: ObjectnessNormalizer,
    },
    /// Binary cross entropy over a random anchor subset.
    Sampled { batch: usize, positive_fraction: f64 },
}

impl Default for ObjectnessMode {
    /// Focal loss normalized by the positive count; the all-anchor mean
    /// leaves the objectness gradient negligible at this scale.
    fn default() -> Self {
        ObjectnessMode::Focal {
            focal: FocalConfig::default(),
            normalizer: ObjectnessNormalizer::Positives,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub sgd: SgdConfig,
    /// Epochs after which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub warmup_steps: u64,
    pub warmup_ratio: f64,
    pub assign: AssignConfig,
    pub objectness: ObjectnessMode,
    pub fiou: FiouConfig,
    pub weights: LossWeights,
    /// `None` skips reweighting entirely (all weights exactly 1).
    pub br: Option<BrConfig>,
    pub roi: RoiSampleConfig,
    pub proposals: ProposalConfig,
    pub cls_loss: ClsLossKind,
}

/// Scenes hold about seven foreground proposals, so a 256-RoI batch would
/// be ~3% foreground; 32 keeps the realized fraction near the nominal 0.25.
pub const TOY_ROIS_PER_SCENE: usize = 32;

/// Single-scene batches with an unnormalized R-CNN input occasionally spike
/// the gradient norm by 10-40x; clipping keeps the second stage alive.
pub const TOY_MAX_GRAD_NORM: f64 = 2.0;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            sgd: SgdConfig { max_grad_norm: Some(TOY_MAX_GRAD_NORM), ..SgdConfig::default() },
            lr_milestones: vec![8, 11],
            lr_gamma: 0.1,
            warmup_steps: 100,
            warmup_ratio: 0.1,
            assign: AssignConfig::default(),
            objectness: ObjectnessMode::default(),
            fiou: FiouConfig::default(),
            weights: LossWeights::default(),
            br: Some(BrConfig::default()),
            roi: RoiSampleConfig { rois_per_scene: TOY_ROIS_PER_SCENE, ..RoiSampleConfig::default() },
            proposals: ProposalConfig::training(),
            cls_loss: ClsLossKind::CrossEntropy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.assign.validate()?;
        self.fiou.validate()?;
        self.weights.validate()?;
        self.roi.validate()?;
        self.proposals.validate()?;
        if let Some(br) = &self.br {
            br.validate()?;
        }
        match &self.objectness {
            ObjectnessMode::Focal { focal, .. } => focal.validate()?,
            ObjectnessMode::Sampled { batch, positive_fraction } => {
                if *batch == 0 || !(*positive_fraction > 0.0 && *positive_fraction <= 1.0) {
                    return Err(Error::Config("sampled objectness needs batch >= 1 and fraction in (0, 1]".into()));
                }
            }
        }
        if !(self.lr_gamma > 0.0) || !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("lr_gamma must be > 0 and warmup_ratio in [0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate of `epoch` (0-based) at global step `step`.
    pub fn learning_rate(&self, epoch: usize, step: u64) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        let mut lr = self.sgd.learning_rate * self.lr_gamma.powi(drops as i32);
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            lr *= self.warmup_ratio + (1.0 - self.warmup_ratio) * t;
        }
        lr
    }
}

/// Which score ranks the final detections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// `sqrt(prior * cls)`.
    #[default]
    Fused,
    /// Second-stage class score alone.
    ClsOnly,
    /// First-stage prior with labels from the best foreground class.
    PriorOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub score_mode: ScoreMode,
    pub proposals: ProposalConfig,
    pub nms: NmsConfig,
    pub score_floor: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_mode: ScoreMode::Fused,
            proposals: ProposalConfig::inference(),
            nms: NmsConfig::default(),
            score_floor: SCORE_FLOOR,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        self.proposals.validate()?;
        self.nms.validate()?;
        if !(0.0..=1.0).contains(&self.score_floor) {
            return Err(Error::Config("score_floor must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Named pipeline variants of the ablation ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// IoU branch, fused scores, reweighting.
    Full,
    NoBr,
    NoFusion,
    /// Scores from the first-stage prior alone.
    PriorOnly,
    /// Sampled cross-entropy objectness, unweighted IoU loss, no IoU branch,
    /// classification scores, no reweighting.
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoBr, Variant::NoFusion, Variant::PriorOnly, Variant::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoBr => "no-br",
            Variant::NoFusion => "no-fusion",
            Variant::PriorOnly => "prior-only",
            Variant::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }

    /// Rewrites the switches this variant controls, leaving everything else as configured.
    pub fn apply(self, model: &mut ModelConfig, train: &mut TrainConfig, infer: &mut InferenceConfig) {
        let br = train.br.unwrap_or_default();
        let with_omega = BrConfig { omega: if br.omega > 0.0 { br.omega } else { BrConfig::default().omega }, ..br };
        match self {
            Variant::Full => {
                model.iou_branch = true;
                train.br = Some(with_omega);
                infer.score_mode = ScoreMode::Fused;
            }
            Variant::NoBr => {
                model.iou_branch = true;
                train.br = None;
                infer.score_mode = ScoreMode::Fused;
            }
            Variant::NoFusion => {
                model.iou_branch = true;
                train.br = Some(with_omega);
                infer.score_mode = ScoreMode::ClsOnly;
            }
            Variant::PriorOnly => {
                model.iou_branch = true;
                train.br = Some(with_omega);
                infer.score_mode = ScoreMode::PriorOnly;
            }
            Variant::Baseline => {
                model.iou_branch = false;
                train.br = None;
                train.objectness = ObjectnessMode::Sampled { batch: 256, positive_fraction: 0.5 };
                train.fiou = FiouConfig { eta: 0.0 };
                infer.score_mode = ScoreMode::ClsOnly;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_is_valid() {
        let m = ModelConfig::default();
        m.validate().unwrap();
        let shapes = m.level_shapes().unwrap();
        assert_eq!((shapes[0].height, shapes[2].width), (8, 2));
    }

    #[test]
    fn non_nesting_levels_rejected() {
        let m = ModelConfig { image_height: 40, ..Default::default() };
        assert!(matches!(m.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn anchor_level_count_must_match() {
        let mut m = ModelConfig::default();
        m.pyramid.extra_levels = 1;
        assert!(m.validate().is_err());
    }

    #[test]
    fn schedule_shape() {
        let t = TrainConfig { warmup_steps: 0, ..Default::default() };
        assert_eq!(t.learning_rate(0, 0), 0.01);
        assert!((t.learning_rate(8, 0) - 1e-3).abs() < 1e-15);
        assert!((t.learning_rate(11, 0) - 1e-4).abs() < 1e-15);
        let w = TrainConfig::default();
        assert!((w.learning_rate(0, 0) - 1e-3).abs() < 1e-15);
        assert_eq!(w.learning_rate(0, 100), 0.01);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("nope").is_err());
    }
}
