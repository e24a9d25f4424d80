//! Deterministic synthetic "vague object" scenes.
//!
//! A scene is a feature grid: background cells carry a background signature,
//! object cells blend a class signature with the background signature by
//! the object's vagueness, and every cell gets Gaussian noise. Signatures are
//! distinct basis vectors of the channel space.

mod io;

pub use io::{read_dataset, write_dataset, FeatureEncoding, SceneRecord};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anchors::{self, AnchorConfig, LevelShape};
use crate::boxes::{iou, BBox};
use crate::error::{Error, Result};
use crate::numcore::Grid;
use crate::postprocess::GroundTruth;

pub const NOISE_SIGMA: f64 = 0.1;

/// Objects at or above this vagueness count as hard.
pub const HARD_VAGUENESS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub bbox: BBox<f64>,
    pub class_id: usize,
    pub vagueness: f64,
    /// Drawn after all non-occluders, covering whatever lies below.
    #[serde(default)]
    pub occluder: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub objects: Vec<ObjectSpec>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels < self.num_classes + 1 {
            return Err(Error::Config(format!(
                "{} channels cannot hold {} class signatures plus background",
                self.channels, self.num_classes
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let b = &o.bbox;
            let inside = b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= self.width as f64 && b.y2 <= self.height as f64;
            if !b.is_valid() || b.is_degenerate() || !inside {
                return Err(Error::Config(format!("object {i}: box {:?} not a positive-area box inside the grid", b.to_array())));
            }
            if !(0.0..=1.0).contains(&o.vagueness) {
                return Err(Error::Config(format!("object {i}: vagueness {} outside [0, 1]", o.vagueness)));
            }
            if o.class_id >= self.num_classes {
                return Err(Error::Config(format!("object {i}: class {} >= {}", o.class_id, self.num_classes)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub grid: Grid<f64>,
    /// Ground truth for every non-occluder object, in spec order.
    pub ground_truths: Vec<GroundTruth<f64>>,
    pub vagueness: Vec<f64>,
}

/// Channel index of the background signature.
pub fn background_channel(num_classes: usize) -> usize {
    num_classes
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let bg = background_channel(spec.num_classes);
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut grid = Grid::zeros(h, w, c);
    for v in grid.values_mut() {
        *v = noise.sample(&mut rng);
    }
    for i in 0..h * w {
        let cell = grid.cell_flat_mut(i);
        cell[bg] += 1.0;
    }
    let draw_order = spec
        .objects
        .iter()
        .filter(|o| !o.occluder)
        .chain(spec.objects.iter().filter(|o| o.occluder));
    for obj in draw_order {
        let b = &obj.bbox;
        let (r0, r1) = cell_span(b.y1, b.y2, h);
        let (c0, c1) = cell_span(b.x1, b.x2, w);
        for r in r0..r1 {
            for col in c0..c1 {
                let cell = grid.cell_mut(r, col);
                for v in cell.iter_mut() {
                    *v = noise.sample(&mut rng);
                }
                cell[obj.class_id] += 1.0 - obj.vagueness;
                cell[bg] += obj.vagueness;
            }
        }
    }
    let ground_truths = spec
        .objects
        .iter()
        .filter(|o| !o.occluder)
        .map(|o| GroundTruth { bbox: o.bbox, class_id: o.class_id })
        .collect();
    let vagueness = spec.objects.iter().filter(|o| !o.occluder).map(|o| o.vagueness).collect();
    Ok(Scene {
        spec: spec.clone(),
        grid,
        ground_truths,
        vagueness,
    })
}

/// Cells whose centers fall inside `[lo, hi)`.
fn cell_span(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let start = (lo - 0.5).ceil().max(0.0) as usize;
    let end = ((hi - 0.5).ceil().max(0.0) as usize).min(n);
    (start.min(end), end)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_scenes: usize,
    /// Fraction of hard (vagueness >= 0.5) objects.
    pub vagueness_mix: f64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: usize,
    pub max_side: usize,
    /// Upper vagueness of hard objects.
    pub max_vagueness: f64,
    /// Probability that a scene gets one occluding distractor patch.
    pub occluder_prob: f64,
    /// Minimum IoU every ground truth must reach with some default anchor.
    pub min_anchor_iou: f64,
    pub train_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 100,
            vagueness_mix: 0.5,
            height: 64,
            width: 64,
            channels: 8,
            num_classes: 3,
            min_objects: 1,
            max_objects: 4,
            min_side: 6,
            max_side: 28,
            max_vagueness: 0.9,
            occluder_prob: 0.25,
            min_anchor_iou: 0.5,
            train_fraction: 0.8,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scenes == 0 {
            return Err(Error::Config("n_scenes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.vagueness_mix) {
            return Err(Error::Config("vagueness_mix must lie in [0, 1]".into()));
        }
        if self.min_objects > self.max_objects || self.min_side == 0 || self.min_side > self.max_side {
            return Err(Error::Config("object count / size ranges are inverted or empty".into()));
        }
        if self.max_side > self.height.min(self.width) {
            return Err(Error::Config("max_side exceeds the grid".into()));
        }
        if !(HARD_VAGUENESS..=1.0).contains(&self.max_vagueness) {
            return Err(Error::Config("max_vagueness must lie in [0.5, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) || !(0.0..=1.0).contains(&self.occluder_prob) {
            return Err(Error::Config("fractions must lie in [0, 1]".into()));
        }
        if self.channels < self.num_classes + 1 {
            return Err(Error::Config("channels must exceed num_classes".into()));
        }
        Ok(())
    }

    /// Default toy anchors laid over this grid.
    pub fn anchor_boxes(&self) -> Result<Vec<BBox<f64>>> {
        let cfg = AnchorConfig::default();
        let shapes: Vec<LevelShape> = cfg
            .levels
            .iter()
            .map(|l| LevelShape {
                height: (self.height as f64 / l.stride).floor() as usize,
                width: (self.width as f64 / l.stride).floor() as usize,
            })
            .collect();
        Ok(anchors::generate::<f64>(&shapes, &cfg)?.into_iter().map(|a| a.bbox).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub scenes: Vec<Scene>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Dataset {
    pub fn train_scenes(&self) -> impl Iterator<Item = &Scene> {
        self.train.iter().map(|&i| &self.scenes[i])
    }

    pub fn val_scenes(&self) -> impl Iterator<Item = &Scene> {
        self.val.iter().map(|&i| &self.scenes[i])
    }

    pub fn num_objects(&self) -> usize {
        self.scenes.iter().map(|s| s.ground_truths.len()).sum()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Train/val split: indices ordered by a hash of the scene index, the first
/// `round(train_fraction * n)` going to training. Both lists come back sorted.
pub fn split_indices(n: usize, train_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (splitmix64(i as u64), i));
    let n_train = (train_fraction * n as f64).round() as usize;
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn max_anchor_iou(b: &BBox<f64>, anchors: &[BBox<f64>]) -> f64 {
    anchors.iter().map(|a| iou(a, b)).fold(0.0, f64::max)
}

/// Samples the object layout of scene `index`.
pub fn sample_scene_spec(cfg: &DatasetConfig, index: usize, anchors: &[BBox<f64>]) -> SceneSpec {
    let seed = cfg.seed ^ index as u64;
    // layout stream is separate from the pixel-noise stream seeded by `seed`
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    let n_obj = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(n_obj + 1);
    let mut attempts = 0;
    while objects.len() < n_obj && attempts < 400 {
        attempts += 1;
        let bbox = sample_box(&mut rng, cfg);
        if max_anchor_iou(&bbox, anchors) < cfg.min_anchor_iou {
            continue;
        }
        let crowded = objects.iter().any(|o| {
            let inter = intersection_area(&o.bbox, &bbox);
            inter > 0.25 * o.bbox.area().min(bbox.area())
        });
        if crowded {
            continue;
        }
        let hard = rng.random_bool(cfg.vagueness_mix);
        let vagueness = if hard {
            rng.random_range(HARD_VAGUENESS..=cfg.max_vagueness)
        } else {
            rng.random_range(0.0..HARD_VAGUENESS)
        };
        objects.push(ObjectSpec {
            bbox,
            class_id: rng.random_range(0..cfg.num_classes),
            vagueness,
            occluder: false,
        });
    }
    if rng.random_bool(cfg.occluder_prob) && !objects.is_empty() {
        // a background-signature patch over part of one object
        let target = objects[rng.random_range(0..objects.len())].bbox;
        let side_w = (target.width() * 0.4).max(2.0).floor();
        let side_h = (target.height() * 0.4).max(2.0).floor();
        let x1 = if rng.random_bool(0.5) { target.x1 } else { target.x2 - side_w };
        let y1 = if rng.random_bool(0.5) { target.y1 } else { target.y2 - side_h };
        objects.push(ObjectSpec {
            bbox: BBox { x1, y1, x2: x1 + side_w, y2: y1 + side_h },
            class_id: 0,
            vagueness: 1.0,
            occluder: true,
        });
    }
    SceneSpec {
        seed,
        height: cfg.height,
        width: cfg.width,
        channels: cfg.channels,
        num_classes: cfg.num_classes,
        objects,
    }
}

fn intersection_area(a: &BBox<f64>, b: &BBox<f64>) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    iw * ih
}

fn sample_box(rng: &mut ChaCha8Rng, cfg: &DatasetConfig) -> BBox<f64> {
    let w = rng.random_range(cfg.min_side..=cfg.max_side);
    let h = rng.random_range(cfg.min_side..=cfg.max_side);
    let x1 = rng.random_range(0..=cfg.width - w);
    let y1 = rng.random_range(0..=cfg.height - h);
    BBox {
        x1: x1 as f64,
        y1: y1 as f64,
        x2: (x1 + w) as f64,
        y2: (y1 + h) as f64,
    }
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let anchors = cfg.anchor_boxes()?;
    let scenes = (0..cfg.n_scenes)
        .map(|i| generate_scene(&sample_scene_spec(cfg, i, &anchors)))
        .collect::<Result<Vec<_>>>()?;
    let (train, val) = split_indices(cfg.n_scenes, cfg.train_fraction);
    Ok(Dataset {
        config: cfg.clone(),
        scenes,
        train,
        val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_object(v: f64) -> SceneSpec {
        SceneSpec {
            seed: 9,
            height: 16,
            width: 16,
            channels: 4,
            num_classes: 2,
            objects: vec![ObjectSpec { bbox: BBox::from([2.0, 2.0, 10.0, 10.0]), class_id: 1, vagueness: v, occluder: false }],
        }
    }

    fn mean_channel(scene: &Scene, ch: usize, inside: bool) -> f64 {
        let mut s = 0.0;
        let mut n = 0.0;
        for r in 0..16 {
            for c in 0..16 {
                let is_in = (2..10).contains(&r) && (2..10).contains(&c);
                if is_in == inside {
                    s += scene.grid.get(r, c, ch);
                    n += 1.0;
                }
            }
        }
        s / n
    }

    #[test]
    fn clear_object_carries_class_signature() {
        let s = generate_scene(&one_object(0.0)).unwrap();
        assert!((mean_channel(&s, 1, true) - 1.0).abs() < 0.05);
        assert!(mean_channel(&s, 2, true).abs() < 0.05);
        assert!((mean_channel(&s, 2, false) - 1.0).abs() < 0.05);
        assert_eq!(s.ground_truths.len(), 1);
    }

    #[test]
    fn fully_vague_object_mimics_background() {
        let s = generate_scene(&one_object(1.0)).unwrap();
        for ch in 0..4 {
            assert!((mean_channel(&s, ch, true) - mean_channel(&s, ch, false)).abs() < 0.05);
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(&one_object(0.3)).unwrap();
        let b = generate_scene(&one_object(0.3)).unwrap();
        assert_eq!(a.grid.values(), b.grid.values());
    }

    #[test]
    fn empty_scene_is_valid() {
        let mut spec = one_object(0.0);
        spec.objects.clear();
        assert!(generate_scene(&spec).unwrap().ground_truths.is_empty());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = one_object(0.0);
        spec.objects[0].vagueness = 1.5;
        assert!(generate_scene(&spec).is_err());
        let mut spec = one_object(0.0);
        spec.objects[0].bbox = BBox::from([10.0, 10.0, 20.0, 20.0]);
        assert!(generate_scene(&spec).is_err());
    }

    #[test]
    fn split_is_exact() {
        let (t, v) = split_indices(100, 0.8);
        assert_eq!((t.len(), v.len()), (80, 20));
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn mix_controls_hardness() {
        for (mix, hard) in [(0.0, false), (1.0, true)] {
            let cfg = DatasetConfig { n_scenes: 12, vagueness_mix: mix, ..Default::default() };
            let ds = generate_dataset(&cfg).unwrap();
            assert!(ds.num_objects() > 0);
            for s in &ds.scenes {
                assert!(s.vagueness.iter().all(|&v| (v >= HARD_VAGUENESS) == hard));
            }
        }
    }

    #[test]
    fn every_gt_reaches_an_anchor() {
        let cfg = DatasetConfig { n_scenes: 30, ..Default::default() };
        let anchors = cfg.anchor_boxes().unwrap();
        let ds = generate_dataset(&cfg).unwrap();
        for s in &ds.scenes {
            for g in &s.ground_truths {
                assert!(max_anchor_iou(&g.bbox, &anchors) >= 0.5);
                assert!(g.bbox.area() > 0.0);
            }
        }
    }

    #[test]
    fn signatures_are_orthogonal_basis_vectors() {
        // class c lives on channel c, background on channel num_classes
        assert_eq!(background_channel(3), 3);
    }
}
