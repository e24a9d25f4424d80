//! Registered finite-difference checks of every loss and layer, each run at
//! many random interior points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{decode, BBox, Delta};
use crate::detector::roi::roi_pool;
use crate::detector::roi::roi_pool_backward;
use crate::detector::{fuse_pyramid, fuse_pyramid_backward, ModelConfig, Network, PyramidConfig};
use crate::error::Result;
use crate::losses::{
    fast_iou_loss, focal_loss, improved_iou_loss, iou_pred_loss, rcnn_reg_loss, weighted_ce_loss, FiouConfig,
    FocalConfig,
};
use crate::numcore::gradcheck::{finite_diff_check, DEFAULT_STEP};
use crate::numcore::{
    channel_norm_backward, channel_norm_forward, linear_backward, linear_forward, relu_backward, relu_forward,
    softmax, Grid, LayerParams,
};

pub const SUITE_TOLERANCE: f64 = 1e-4;
pub const SUITE_POINTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Loss,
    Layer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub kind: CheckKind,
    pub points: usize,
    pub worst_relative_error: f64,
    /// Index of the point with the worst error.
    pub worst_point: usize,
    pub passed: bool,
}

type PointCheck = fn(&mut ChaCha8Rng) -> Result<f64>;

/// Every registered check: name, kind, one-point check returning the worst
/// relative error at a freshly drawn interior point.
pub fn registry() -> Vec<(&'static str, CheckKind, PointCheck)> {
    vec![
        ("focal", CheckKind::Loss, focal_point),
        ("improved_iou", CheckKind::Loss, improved_iou_point),
        ("fast_iou", CheckKind::Loss, fast_iou_point),
        ("iou_pred", CheckKind::Loss, iou_pred_point),
        ("rcnn_l1", CheckKind::Loss, l1_point),
        ("weighted_ce", CheckKind::Loss, weighted_ce_point),
        ("linear", CheckKind::Layer, linear_point),
        ("channel_norm", CheckKind::Layer, norm_point),
        ("relu", CheckKind::Layer, relu_point),
        ("fuse_pyramid", CheckKind::Layer, pyramid_point),
        ("rpn_head", CheckKind::Layer, rpn_head_point),
        ("roi_pool", CheckKind::Layer, roi_pool_point),
        ("rcnn_head", CheckKind::Layer, rcnn_point),
    ]
}

/// Runs every registered check at `points` points.
pub fn run_suite(points: usize, seed: u64, tolerance: f64) -> Result<Vec<CheckOutcome>> {
    registry()
        .into_iter()
        .enumerate()
        .map(|(k, (name, kind, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64 * 7919));
            let mut worst = (0.0f64, 0usize);
            for i in 0..points {
                let e = check(&mut rng)?;
                if e > worst.0 || !e.is_finite() {
                    worst = (e, i);
                }
            }
            Ok(CheckOutcome {
                name: name.into(),
                kind,
                points,
                worst_relative_error: worst.0,
                worst_point: worst.1,
                passed: worst.0 <= tolerance,
            })
        })
        .collect()
}

fn check<F: FnMut(&[f64]) -> f64>(f: F, point: &[f64], analytic: &[f64]) -> Result<f64> {
    Ok(finite_diff_check(f, point, analytic, DEFAULT_STEP)?.max_relative_error)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn focal_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let p = rng.random_range(0.02..0.98);
    let y = rng.random_range(0..2u8);
    let cfg = FocalConfig { alpha: rng.random_range(0.1..0.9), gamma: rng.random_range(0.0..3.0) };
    let (_, g) = focal_loss(p, y, &cfg)?;
    check(|x| focal_loss(x[0], y, &cfg).map_or(f64::NAN, |v| v.0), &[p], &[g])
}

/// Anchor, ground truth and a prediction delta whose decoded box overlaps
/// the ground truth with no coinciding edges.
fn box_triplet(rng: &mut ChaCha8Rng) -> (BBox<f64>, BBox<f64>, Delta<f64>) {
    loop {
        let anchor = BBox::from_center(rng.random_range(10.0..50.0), rng.random_range(10.0..50.0), rng.random_range(6.0..30.0), rng.random_range(6.0..30.0));
        let gt = BBox::from_center(
            anchor.cx() + rng.random_range(-4.0..4.0),
            anchor.cy() + rng.random_range(-4.0..4.0),
            anchor.width() * rng.random_range(0.6..1.6),
            anchor.height() * rng.random_range(0.6..1.6),
        );
        let d = Delta::from_slice(&uniform(rng, 4, -0.4, 0.4));
        let pred = decode(&d, &anchor);
        let (pa, ga) = (pred.to_array(), gt.to_array());
        let separated = pa.iter().all(|a| ga.iter().all(|b| (a - b).abs() > 0.05));
        if separated && crate::boxes::iou(&pred, &gt) > 0.05 {
            return (anchor, gt, d);
        }
    }
}

fn improved_iou_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (anchor, gt, d) = box_triplet(rng);
    let l = improved_iou_loss(&d, &gt, &anchor)?;
    check(|x| improved_iou_loss(&Delta::from_slice(x), &gt, &anchor).map_or(f64::NAN, |l| l.value), &d.to_array(), &l.grad)
}

fn fast_iou_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (anchor, gt, d) = box_triplet(rng);
    let cfg = FiouConfig { eta: rng.random_range(0.0..4.0) };
    let l = fast_iou_loss(&d, &gt, &anchor, &cfg)?;
    // the IoU^eta factor is a constant of the step
    let weight = l.iou.powf(cfg.eta);
    check(
        |x| weight * improved_iou_loss(&Delta::from_slice(x), &gt, &anchor).map_or(f64::NAN, |l| l.value),
        &d.to_array(),
        &l.grad,
    )
}

fn iou_pred_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let g_hat = rng.random_range(0.02..0.98);
    let target = rng.random_range(0.0..1.0);
    let (_, g) = iou_pred_loss(g_hat, target);
    check(|x| iou_pred_loss(x[0], target).0, &[g_hat], &[g])
}

fn l1_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(1..5);
    let mut pred = Vec::new();
    let mut target = Vec::new();
    for _ in 0..n {
        let t = uniform(rng, 4, -1.0, 1.0);
        // keep every coordinate off its kink
        let p: Vec<f64> = t
            .iter()
            .map(|&v| v + rng.random_range(0.01..0.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        pred.extend(p);
        target.push(Delta::from_slice(&t));
    }
    let pairs = |flat: &[f64]| -> Vec<(Delta<f64>, Delta<f64>)> {
        flat.chunks(4).zip(&target).map(|(p, t)| (Delta::from_slice(p), *t)).collect()
    };
    let l = rcnn_reg_loss(&pairs(&pred));
    let analytic: Vec<f64> = l.grads.iter().flatten().copied().collect();
    check(|x| rcnn_reg_loss(&pairs(x)).value, &pred, &analytic)
}

fn weighted_ce_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, c) = (rng.random_range(1..6), 4);
    let logits = uniform(rng, n * c, -3.0, 3.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let weights = uniform(rng, n, 0.1, 2.0);
    let probs = |flat: &[f64]| -> Vec<Vec<f64>> { flat.chunks(c).map(softmax).collect() };
    let l = weighted_ce_loss(&probs(&logits), &labels, &weights)?;
    let analytic: Vec<f64> = l.logit_grads.iter().flatten().copied().collect();
    check(
        |x| weighted_ce_loss(&probs(x), &labels, &weights).map_or(f64::NAN, |l| l.value),
        &logits,
        &analytic,
    )
}

/// Sequentially carves named pieces out of a flat parameter vector.
struct Carver<'a> {
    flat: &'a [f64],
    at: usize,
}

impl<'a> Carver<'a> {
    fn new(flat: &'a [f64]) -> Self {
        Self { flat, at: 0 }
    }

    fn take(&mut self, n: usize) -> Vec<f64> {
        let v = self.flat[self.at..self.at + n].to_vec();
        self.at += n;
        v
    }

    fn grid(&mut self, h: usize, w: usize, c: usize) -> Grid<f64> {
        Grid::from_vec(h, w, c, self.take(h * w * c)).expect("finite values")
    }

    fn params(&mut self, like: &LayerParams<f64>) -> LayerParams<f64> {
        let w = self.take(like.weights.len());
        let b = self.take(like.biases.len());
        LayerParams::new(like.name.clone(), like.in_dim, like.out_dim, w, b).expect("same shape")
    }
}

fn flatten_params(ps: &[&LayerParams<f64>]) -> Vec<f64> {
    ps.iter().flat_map(|p| p.weights.iter().chain(&p.biases).copied()).collect()
}

fn flatten_grads(ps: &[&LayerParams<f64>]) -> Vec<f64> {
    ps.iter().flat_map(|p| p.grad_weights.iter().chain(&p.grad_biases).copied()).collect()
}

fn dot(a: &Grid<f64>, b: &Grid<f64>) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
}

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, scale: f64) -> Grid<f64> {
    Grid::from_vec(h, w, c, uniform(rng, h * w * c, -scale, scale)).expect("finite values")
}

fn random_params(rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize) -> LayerParams<f64> {
    let w = uniform(rng, i * o, -1.0, 1.0);
    let b = uniform(rng, o, -0.5, 0.5);
    LayerParams::new(name, i, o, w, b).expect("shapes by construction")
}

fn linear_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w, i, o) = (2, 3, rng.random_range(1..5), rng.random_range(1..5));
    let x = random_grid(rng, h, w, i, 1.0);
    let mut p = random_params(rng, "linear", i, o);
    let up = random_grid(rng, h, w, o, 1.0);
    let dx = linear_backward(&x, &mut p, &up)?;
    let mut point = x.values().to_vec();
    point.extend(flatten_params(&[&p]));
    let mut analytic = dx.into_values();
    analytic.extend(flatten_grads(&[&p]));
    let like = p.clone();
    check(
        |v| {
            let mut c = Carver::new(v);
            let (x, p) = (c.grid(h, w, i), c.params(&like));
            linear_forward(&x, &p).map_or(f64::NAN, |y| dot(&y, &up))
        },
        &point,
        &analytic,
    )
}

fn norm_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let groups = rng.random_range(1..3);
    let c = groups * rng.random_range(2..4);
    let x = random_grid(rng, 2, 2, c, 2.0);
    let mut p = LayerParams::new("norm", c, c, uniform(rng, c, 0.5, 1.5), uniform(rng, c, -0.5, 0.5))?;
    let up = random_grid(rng, 2, 2, c, 1.0);
    let dx = channel_norm_backward(&x, groups, &mut p, &up)?;
    let mut point = x.values().to_vec();
    point.extend(flatten_params(&[&p]));
    let mut analytic = dx.into_values();
    analytic.extend(flatten_grads(&[&p]));
    let like = p.clone();
    check(
        |v| {
            let mut cv = Carver::new(v);
            let (x, p) = (cv.grid(2, 2, c), cv.params(&like));
            channel_norm_forward(&x, groups, &p).map_or(f64::NAN, |y| dot(&y, &up))
        },
        &point,
        &analytic,
    )
}

fn relu_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    // magnitudes bounded away from the kink
    let vals: Vec<f64> = (0..12)
        .map(|_| rng.random_range(0.01..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let x = Grid::from_vec(2, 2, 3, vals)?;
    let up = random_grid(rng, 2, 2, 3, 1.0);
    let dx = relu_backward(&x, &up)?;
    check(
        |v| dot(&relu_forward(&Grid::from_vec(2, 2, 3, v.to_vec()).expect("finite")), &up),
        x.values(),
        dx.values(),
    )
}

fn pyramid_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = 2;
    let n_extra = rng.random_range(0..2);
    let sizes = [8usize, 4, 2];
    let xs: Vec<Grid<f64>> = sizes.iter().map(|&s| random_grid(rng, s, s, c, 1.0)).collect();
    let mut lateral: Vec<_> = (0..3).map(|l| random_params(rng, &format!("lateral{l}"), c, c)).collect();
    let mut output: Vec<_> = (0..3).map(|l| random_params(rng, &format!("output{l}"), c, c)).collect();
    let mut extra: Vec<_> = (0..n_extra).map(|l| random_params(rng, &format!("extra{l}"), c, c)).collect();
    let (p, extra_in, q) = fuse_pyramid(&xs, &lateral, &output, &extra)?;
    let ups: Vec<Grid<f64>> = q.iter().map(|g| random_grid(rng, g.height(), g.width(), c, 1.0)).collect();
    let dx = fuse_pyramid_backward(&xs, &p, &extra_in, &mut lateral, &mut output, &mut extra, ups.clone())?;
    let all: Vec<&LayerParams<f64>> = lateral.iter().chain(&output).chain(&extra).collect();
    let mut point: Vec<f64> = xs.iter().flat_map(|g| g.values().iter().copied()).collect();
    point.extend(flatten_params(&all));
    let mut analytic: Vec<f64> = dx.iter().flat_map(|g| g.values().iter().copied()).collect();
    analytic.extend(flatten_grads(&all));
    let likes: Vec<LayerParams<f64>> = all.iter().map(|p| (*p).clone()).collect();
    check(
        |v| {
            let mut cv = Carver::new(v);
            let xs: Vec<Grid<f64>> = sizes.iter().map(|&s| cv.grid(s, s, c)).collect();
            let ps: Vec<LayerParams<f64>> = likes.iter().map(|l| cv.params(l)).collect();
            let (lat, rest) = ps.split_at(3);
            let (out, ext) = rest.split_at(3);
            match fuse_pyramid(&xs, lat, out, ext) {
                Ok((_, _, q)) => q.iter().zip(&ups).map(|(a, b)| dot(a, b)).sum(),
                Err(_) => f64::NAN,
            }
        },
        &point,
        &analytic,
    )
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_height: 32,
        image_width: 32,
        pyramid: PyramidConfig { channels: 4, head_depth: 2, norm_groups: 2, ..Default::default() },
        fc_dim: 6,
        ..Default::default()
    }
}

fn rpn_head_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = tiny_model();
    let mut net = Network::<f64>::new(&cfg, rng.random())?;
    let f = cfg.pyramid.channels;
    let a = net.anchors_per_cell;
    let q = random_grid(rng, 2, 2, f, 1.0);
    let (_, cache) = net.rpn_level(&q, true)?;
    let d_obj = random_grid(rng, 2, 2, a, 1.0);
    let d_iou = random_grid(rng, 2, 2, a, 1.0);
    let d_reg = random_grid(rng, 2, 2, 4 * a, 1.0);
    // a pre-activation sitting on the ReLU kink would make the check meaningless
    let mut h = q.clone();
    for (lin, norm) in net.tower_linear.iter().zip(&net.tower_norm) {
        let n = channel_norm_forward(&linear_forward(&h, lin)?, net.norm_groups, norm)?;
        if n.values().iter().any(|v| v.abs() < 1e-3) {
            return rpn_head_point(rng);
        }
        h = relu_forward(&n);
    }
    net.zero_grad();
    let dq = net.rpn_level_backward(&cache, &d_obj, Some(&d_iou), &d_reg)?;
    let objective = |n: &Network<f64>, q: &Grid<f64>| -> f64 {
        match n.rpn_level(q, true) {
            Ok((o, _)) => dot(&o.obj, &d_obj) + dot(o.iou.as_ref().expect("branch on"), &d_iou) + dot(&o.reg, &d_reg),
            Err(_) => f64::NAN,
        }
    };
    let head = |n: &Network<f64>| -> Vec<LayerParams<f64>> {
        n.tower_linear
            .iter()
            .chain(&n.tower_norm)
            .chain([&n.rpn_obj, &n.rpn_iou, &n.rpn_reg])
            .cloned()
            .collect()
    };
    let likes = head(&net);
    let refs: Vec<&LayerParams<f64>> = likes.iter().collect();
    let mut point = q.values().to_vec();
    point.extend(flatten_params(&refs));
    let mut analytic = dq.into_values();
    analytic.extend(flatten_grads(&refs));
    let depth = net.tower_linear.len();
    let mut probe = net.clone();
    check(
        |v| {
            let mut cv = Carver::new(v);
            let q = cv.grid(2, 2, f);
            let ps: Vec<LayerParams<f64>> = likes.iter().map(|l| cv.params(l)).collect();
            probe.tower_linear = ps[..depth].to_vec();
            probe.tower_norm = ps[depth..2 * depth].to_vec();
            probe.rpn_obj = ps[2 * depth].clone();
            probe.rpn_iou = ps[2 * depth + 1].clone();
            probe.rpn_reg = ps[2 * depth + 2].clone();
            objective(&probe, &q)
        },
        &point,
        &analytic,
    )
}

fn roi_pool_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w, c) = (6, 6, 3);
    let stride = 8.0;
    let level = random_grid(rng, h, w, c, 1.0);
    let x1 = rng.random_range(0.0..30.0);
    let y1 = rng.random_range(0.0..30.0);
    let b = BBox::from([x1, y1, x1 + rng.random_range(2.0..18.0), y1 + rng.random_range(2.0..18.0)]);
    let up = uniform(rng, roi_pool(&level, &b, stride).len(), -1.0, 1.0);
    let mut d_level = Grid::zeros(h, w, c);
    roi_pool_backward(&mut d_level, &b, stride, &up);
    check(
        |v| {
            let g = Grid::from_vec(h, w, c, v.to_vec()).expect("finite");
            roi_pool(&g, &b, stride).iter().zip(&up).map(|(a, u)| a * u).sum()
        },
        level.values(),
        d_level.values(),
    )
}

fn rcnn_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = tiny_model();
    let mut net = Network::<f64>::new(&cfg, rng.random())?;
    for p in [&mut net.cls, &mut net.reg] {
        p.weights.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let n = rng.random_range(1..4);
    let d = cfg.roi_dim();
    let rois = random_grid(rng, n, 1, d, 1.0);
    let (out, _) = net.rcnn(&rois)?;
    let d_logits = random_grid(rng, n, 1, out.logits.channels(), 1.0);
    let d_deltas = random_grid(rng, n, 1, 4, 1.0);
    let (_, cache) = net.rcnn(&rois)?;
    net.zero_grad();
    let drois = net.rcnn_backward(&cache, &d_logits, &d_deltas)?;
    let likes: Vec<LayerParams<f64>> = [&net.fc1, &net.fc2, &net.cls, &net.reg].into_iter().cloned().collect();
    let refs: Vec<&LayerParams<f64>> = likes.iter().collect();
    // keep away from ReLU kinks
    let h1 = linear_forward(&rois, &net.fc1)?;
    let h2 = linear_forward(&relu_forward(&h1), &net.fc2)?;
    if h1.values().iter().chain(h2.values()).any(|v| v.abs() < 1e-3) {
        return rcnn_point(rng);
    }
    let mut point = rois.values().to_vec();
    point.extend(flatten_params(&refs));
    let mut analytic = drois.into_values();
    analytic.extend(flatten_grads(&refs));
    let mut probe = net.clone();
    check(
        |v| {
            let mut cv = Carver::new(v);
            let r = cv.grid(n, 1, d);
            let ps: Vec<LayerParams<f64>> = likes.iter().map(|l| cv.params(l)).collect();
            probe.fc1 = ps[0].clone();
            probe.fc2 = ps[1].clone();
            probe.cls = ps[2].clone();
            probe.reg = ps[3].clone();
            match probe.rcnn(&r) {
                Ok((o, _)) => dot(&o.logits, &d_logits) + dot(&o.deltas, &d_deltas),
                Err(_) => f64::NAN,
            }
        },
        &point,
        &analytic,
    )
}
