//! Toy two-stage detector: patch-embedding backbone, two-path feature
//! pyramid, first stage with objectness / IoU / box outputs, RoI pooling and
//! a two-layer fully connected second stage.

mod checkpoint;
mod config;
mod infer;
mod network;
pub mod roi;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_BLOB, CHECKPOINT_MANIFEST};
pub use config::{
    InferenceConfig, ModelConfig, ObjectnessMode, PyramidConfig, RoiSampleConfig, ScoreMode, TrainConfig, Variant,
    TOY_MAX_GRAD_NORM, TOY_ROIS_PER_SCENE,
};
pub use infer::evaluate;
pub use network::{
    embed_patches, fuse_pyramid, fuse_pyramid_backward, patchify, FeatureCache, HeadCache, Network, RcnnCache, RcnnOutput,
    RpnLevelOutput, OBJECTNESS_PRIOR_BIAS,
};
pub use train::{
    step_rng, train_epoch, BrStats, EpochLog, PositiveAnchor, SampledRoi, StepOutput, StepPlan, TrainState,
};

use crate::anchors::{self, Anchor, LevelShape};
use crate::boxes::{BBox, Delta};
use crate::error::Result;
use crate::numcore::{sigmoid, Grid};
use crate::postprocess::ScoredAnchor;
use crate::scalar::Scalar;

/// Model configuration, parameters and the anchor layout they imply.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector<T> {
    pub config: ModelConfig,
    pub net: Network<T>,
    anchors: Vec<Anchor<T>>,
    anchor_boxes: Vec<BBox<T>>,
    level_offsets: Vec<usize>,
    shapes: Vec<LevelShape>,
}

/// First-stage pass over one image.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub features: FeatureCache<T>,
    pub heads: Vec<HeadCache<T>>,
    pub outputs: Vec<RpnLevelOutput<T>>,
}

impl<T: Scalar> Detector<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let net = Network::new(&config, seed)?;
        Self::from_parts(config, net)
    }

    pub fn from_parts(config: ModelConfig, net: Network<T>) -> Result<Self> {
        config.validate()?;
        let shapes = config.level_shapes()?;
        let anchors = anchors::generate::<T>(&shapes, &config.anchors)?;
        let per_cell = config.anchors.anchors_per_cell();
        let mut level_offsets = Vec::with_capacity(shapes.len() + 1);
        let mut acc = 0;
        for s in &shapes {
            level_offsets.push(acc);
            acc += s.height * s.width * per_cell;
        }
        level_offsets.push(acc);
        let anchor_boxes = anchors.iter().map(|a| a.bbox).collect();
        Ok(Self { config, net, anchors, anchor_boxes, level_offsets, shapes })
    }

    pub fn anchors(&self) -> &[Anchor<T>] {
        &self.anchors
    }

    pub fn anchor_boxes(&self) -> &[BBox<T>] {
        &self.anchor_boxes
    }

    pub fn level_shapes(&self) -> &[LevelShape] {
        &self.shapes
    }

    /// `(level, cell, shape)` of anchor `i`.
    fn locate(&self, i: usize) -> (usize, usize, usize) {
        let a = self.net.anchors_per_cell;
        let level = self.level_offsets.partition_point(|&o| o <= i) - 1;
        let local = i - self.level_offsets[level];
        (level, local / a, local % a)
    }

    pub fn forward(&self, image: &Grid<T>) -> Result<Forward<T>> {
        let features = self.net.features(image, &self.config)?;
        let mut heads = Vec::with_capacity(features.q.len());
        let mut outputs = Vec::with_capacity(features.q.len());
        for q in &features.q {
            let (out, cache) = self.net.rpn_level(q, self.config.iou_branch)?;
            outputs.push(out);
            heads.push(cache);
        }
        Ok(Forward { features, heads, outputs })
    }

    /// Objectness logit, IoU logit (when the branch exists) and box delta of anchor `i`.
    pub fn anchor_output(&self, fwd: &Forward<T>, i: usize) -> (T, Option<T>, Delta<T>) {
        let (level, cell, k) = self.locate(i);
        let out = &fwd.outputs[level];
        let obj = out.obj.cell_flat(cell)[k];
        let iou = out.iou.as_ref().map(|g| g.cell_flat(cell)[k]);
        let reg = out.reg.cell_flat(cell);
        (obj, iou, Delta::from_slice(&reg[4 * k..4 * k + 4]))
    }

    /// Probabilities of every anchor; without the IoU branch the IoU
    /// prediction is the objectness itself.
    pub fn scored_anchors(&self, fwd: &Forward<T>) -> Vec<ScoredAnchor<T>> {
        (0..self.anchors.len())
            .map(|i| {
                let (obj, iou, delta) = self.anchor_output(fwd, i);
                let objectness = sigmoid(obj);
                ScoredAnchor {
                    anchor: self.anchor_boxes[i],
                    level: self.anchors[i].level,
                    delta,
                    objectness,
                    iou_pred: iou.map_or(objectness, sigmoid),
                }
            })
            .collect()
    }

    /// Pyramid level and stride an RoI is pooled from.
    pub fn roi_source(&self, b: &BBox<T>) -> (usize, f64) {
        let levels = &self.config.anchors.levels;
        let l = roi::roi_level(b, levels.len(), levels[0].base_size);
        (l, levels[l].stride)
    }

    /// `(n, 1, roi_dim)` grid of pooled RoI features.
    pub fn roi_features(&self, fwd: &Forward<T>, boxes: &[BBox<T>]) -> Result<Grid<T>> {
        let rows: Vec<Vec<T>> = boxes
            .iter()
            .map(|b| {
                let (l, stride) = self.roi_source(b);
                roi::roi_pool(&fwd.features.q[l], b, stride)
            })
            .collect();
        if rows.is_empty() {
            return Ok(Grid::zeros(0, 1, self.config.roi_dim()));
        }
        Grid::from_rows(&rows)
    }
}
