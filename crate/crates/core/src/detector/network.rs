//! Backbone, two-path feature pyramid, first-stage head and second-stage
//! fully connected head, with explicit activation caches for backprop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numcore::{
    avg_pool2, avg_pool2_backward, channel_norm_backward, channel_norm_forward, linear_backward, linear_forward,
    relu_backward, relu_forward, upsample_nearest2, upsample_nearest2_backward, Grid, LayerParams,
};
use crate::scalar::Scalar;

/// Initial objectness bias: `sigmoid(-ln 99) = 0.01`.
pub const OBJECTNESS_PRIOR_BIAS: f64 = -4.59511985013459;

/// Scale applied to the initial weights of the output layers.
const OUTPUT_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub stem: LayerParams<T>,
    /// Top-down lateral maps, one per backbone level.
    pub lateral: Vec<LayerParams<T>>,
    /// Bottom-up output maps, one per backbone level.
    pub output: Vec<LayerParams<T>>,
    /// Maps applied to the pooled previous level for every extra level.
    pub extra: Vec<LayerParams<T>>,
    pub tower_linear: Vec<LayerParams<T>>,
    pub tower_norm: Vec<LayerParams<T>>,
    pub rpn_obj: LayerParams<T>,
    pub rpn_iou: LayerParams<T>,
    pub rpn_reg: LayerParams<T>,
    pub fc1: LayerParams<T>,
    pub fc2: LayerParams<T>,
    pub cls: LayerParams<T>,
    pub reg: LayerParams<T>,
    pub norm_groups: usize,
    pub anchors_per_cell: usize,
}

fn scaled<T: Scalar>(mut p: LayerParams<T>, s: f64) -> LayerParams<T> {
    for w in &mut p.weights {
        *w = *w * T::lit(s);
    }
    p
}

impl<T: Scalar> Network<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = cfg.pyramid.channels;
        let a = cfg.anchors.anchors_per_cell();
        let h = cfg.fc_dim;
        let mut rng_layer = |name: String, i: usize, o: usize| LayerParams::xavier(name, i, o, &mut rng);
        let stem = rng_layer("stem".into(), cfg.patch_dim(), f);
        let lateral = (0..cfg.pyramid.levels).map(|l| rng_layer(format!("lateral{l}"), f, f)).collect();
        let output = (0..cfg.pyramid.levels).map(|l| rng_layer(format!("output{l}"), f, f)).collect();
        let extra = (0..cfg.pyramid.extra_levels).map(|l| rng_layer(format!("extra{l}"), f, f)).collect();
        let tower_linear = (0..cfg.pyramid.head_depth).map(|d| rng_layer(format!("tower{d}"), f, f)).collect();
        let mut rpn_obj = scaled(rng_layer("rpn_obj".into(), f, a), OUTPUT_INIT_SCALE);
        rpn_obj.biases.iter_mut().for_each(|b| *b = T::lit(OBJECTNESS_PRIOR_BIAS));
        let rpn_iou = scaled(rng_layer("rpn_iou".into(), f, a), OUTPUT_INIT_SCALE);
        let rpn_reg = scaled(rng_layer("rpn_reg".into(), f, 4 * a), OUTPUT_INIT_SCALE);
        let fc1 = rng_layer("fc1".into(), cfg.roi_dim(), h);
        let fc2 = rng_layer("fc2".into(), h, h);
        let cls = scaled(rng_layer("cls".into(), h, cfg.num_classes + 1), OUTPUT_INIT_SCALE);
        let reg = scaled(rng_layer("reg".into(), h, 4), OUTPUT_INIT_SCALE);
        let tower_norm = (0..cfg.pyramid.head_depth)
            .map(|d| LayerParams::affine(format!("tower_norm{d}"), f))
            .collect();
        Ok(Self {
            stem,
            lateral,
            output,
            extra,
            tower_linear,
            tower_norm,
            rpn_obj,
            rpn_iou,
            rpn_reg,
            fc1,
            fc2,
            cls,
            reg,
            norm_groups: cfg.pyramid.norm_groups,
            anchors_per_cell: a,
        })
    }

    /// Every parameter tensor in a fixed order.
    pub fn params(&self) -> Vec<&LayerParams<T>> {
        let mut v = vec![&self.stem];
        v.extend(&self.lateral);
        v.extend(&self.output);
        v.extend(&self.extra);
        v.extend(&self.tower_linear);
        v.extend(&self.tower_norm);
        v.extend([&self.rpn_obj, &self.rpn_iou, &self.rpn_reg, &self.fc1, &self.fc2, &self.cls, &self.reg]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut LayerParams<T>> {
        let mut v = vec![&mut self.stem];
        v.extend(&mut self.lateral);
        v.extend(&mut self.output);
        v.extend(&mut self.extra);
        v.extend(&mut self.tower_linear);
        v.extend(&mut self.tower_norm);
        v.extend([
            &mut self.rpn_obj,
            &mut self.rpn_iou,
            &mut self.rpn_reg,
            &mut self.fc1,
            &mut self.fc2,
            &mut self.cls,
            &mut self.reg,
        ]);
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.num_params()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Fixed patch embedding: each `stride x stride` patch becomes one cell
/// holding the channel means of its `patch_grid x patch_grid` sub-blocks.
pub fn patchify<T: Scalar>(input: &Grid<T>, stride: usize, patch_grid: usize) -> Result<Grid<T>> {
    let (h, w, c) = input.shape();
    if h % stride != 0 || w % stride != 0 || stride % patch_grid != 0 {
        return Err(Error::Config(format!("{h}x{w} input does not tile into stride-{stride} patches")));
    }
    let sub = stride / patch_grid;
    let inv = T::one() / T::from_usize_lossy(sub * sub);
    let mut out = Grid::zeros(h / stride, w / stride, patch_grid * patch_grid * c);
    for r in 0..h / stride {
        for col in 0..w / stride {
            let cell = out.cell_mut(r, col);
            for br in 0..patch_grid {
                for bc in 0..patch_grid {
                    let base = (br * patch_grid + bc) * c;
                    for y in 0..sub {
                        for x in 0..sub {
                            let src = input.cell(r * stride + br * sub + y, col * stride + bc * sub + x);
                            for ch in 0..c {
                                cell[base + ch] = cell[base + ch] + src[ch];
                            }
                        }
                    }
                    for ch in 0..c {
                        cell[base + ch] = cell[base + ch] * inv;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// [`patchify`] at `patch_grid` resolution, followed by every neighbour
/// within `radius` at `context_grid` resolution (zeros beyond the border),
/// neighbours in row-major offset order.
pub fn embed_patches<T: Scalar>(
    input: &Grid<T>,
    stride: usize,
    patch_grid: usize,
    radius: usize,
    context_grid: usize,
) -> Result<Grid<T>> {
    let own = patchify(input, stride, patch_grid)?;
    if radius == 0 {
        return Ok(own);
    }
    let ctx = patchify(input, stride, context_grid)?;
    let (h, w, oc) = own.shape();
    let cc = ctx.channels();
    let side = 2 * radius + 1;
    let mut out = Grid::zeros(h, w, oc + (side * side - 1) * cc);
    let r = radius as isize;
    for row in 0..h {
        for col in 0..w {
            let cell = out.cell_mut(row, col);
            cell[..oc].copy_from_slice(own.cell(row, col));
            let mut slot = 0;
            for dr in -r..=r {
                for dc in -r..=r {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (row as isize + dr, col as isize + dc);
                    if nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w {
                        let base = oc + slot * cc;
                        cell[base..base + cc].copy_from_slice(ctx.cell(nr as usize, nc as usize));
                    }
                    slot += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Activations of the backbone and neck.
#[derive(Debug, Clone)]
pub struct FeatureCache<T> {
    patches: Grid<T>,
    /// Backbone levels.
    pub x: Vec<Grid<T>>,
    /// Top-down outputs.
    pub p: Vec<Grid<T>>,
    /// Pooled inputs of the extra levels.
    extra_in: Vec<Grid<T>>,
    /// Neck outputs, finest first.
    pub q: Vec<Grid<T>>,
}

/// Top-down then bottom-up fusion of backbone levels, plus extra strided levels.
pub fn fuse_pyramid<T: Scalar>(
    x: &[Grid<T>],
    lateral: &[LayerParams<T>],
    output: &[LayerParams<T>],
    extra: &[LayerParams<T>],
) -> Result<(Vec<Grid<T>>, Vec<Grid<T>>, Vec<Grid<T>>)> {
    let n = x.len();
    if n == 0 || lateral.len() != n || output.len() != n {
        return Err(Error::Config(format!(
            "{n} backbone levels for {} lateral / {} output maps",
            lateral.len(),
            output.len()
        )));
    }
    for l in 1..n {
        let (h0, w0, _) = x[l - 1].shape();
        let (h1, w1, _) = x[l].shape();
        if h0 != 2 * h1 || w0 != 2 * w1 {
            return Err(Error::Config(format!(
                "backbone level {l} is {h1}x{w1}, not half of {h0}x{w0}"
            )));
        }
    }
    let mut p: Vec<Grid<T>> = vec![Grid::zeros(0, 0, 0); n];
    p[n - 1] = linear_forward(&x[n - 1], &lateral[n - 1])?;
    for l in (0..n - 1).rev() {
        let mut v = linear_forward(&x[l], &lateral[l])?;
        v.add_assign(&upsample_nearest2(&p[l + 1]))?;
        p[l] = v;
    }
    let mut q: Vec<Grid<T>> = Vec::with_capacity(n + extra.len());
    q.push(linear_forward(&p[0], &output[0])?);
    for l in 1..n {
        let mut v = linear_forward(&p[l], &output[l])?;
        v.add_assign(&avg_pool2(&q[l - 1])?)?;
        q.push(v);
    }
    let mut extra_in = Vec::with_capacity(extra.len());
    for e in extra {
        let pooled = avg_pool2(q.last().expect("at least one level"))?;
        q.push(linear_forward(&pooled, e)?);
        extra_in.push(pooled);
    }
    Ok((p, extra_in, q))
}

/// Backward of [`fuse_pyramid`]; returns the gradient of every backbone level.
pub fn fuse_pyramid_backward<T: Scalar>(
    x: &[Grid<T>],
    p: &[Grid<T>],
    extra_in: &[Grid<T>],
    lateral: &mut [LayerParams<T>],
    output: &mut [LayerParams<T>],
    extra: &mut [LayerParams<T>],
    dq: Vec<Grid<T>>,
) -> Result<Vec<Grid<T>>> {
    let n = x.len();
    let mut dq = dq;
    for k in (0..extra.len()).rev() {
        let d_pooled = linear_backward(&extra_in[k], &mut extra[k], &dq[n + k])?;
        let d_prev = avg_pool2_backward(&d_pooled);
        dq[n + k - 1].add_assign(&d_prev)?;
    }
    let mut dp: Vec<Grid<T>> = p.iter().map(|g| Grid::zeros(g.height(), g.width(), g.channels())).collect();
    for l in (0..n).rev() {
        dp[l] = linear_backward(&p[l], &mut output[l], &dq[l])?;
        if l > 0 {
            let d_prev = avg_pool2_backward(&dq[l]);
            dq[l - 1].add_assign(&d_prev)?;
        }
    }
    let mut dx: Vec<Grid<T>> = Vec::with_capacity(n);
    for l in 0..n {
        if l > 0 {
            let up = upsample_nearest2_backward(&dp[l - 1])?;
            dp[l].add_assign(&up)?;
        }
        dx.push(linear_backward(&x[l], &mut lateral[l], &dp[l])?);
    }
    Ok(dx)
}

/// Per-level first-stage activations.
#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    /// Inputs of every tower linear map (the first is the level feature).
    lin_in: Vec<Grid<T>>,
    norm_in: Vec<Grid<T>>,
    relu_in: Vec<Grid<T>>,
    /// Final tower activation.
    top: Grid<T>,
}

/// Raw first-stage outputs of one level: widths `A`, `A` (or 0 without
/// the IoU branch), `4A`.
#[derive(Debug, Clone)]
pub struct RpnLevelOutput<T> {
    pub obj: Grid<T>,
    pub iou: Option<Grid<T>>,
    pub reg: Grid<T>,
}

impl<T: Scalar> Network<T> {
    /// Backbone and neck.
    pub fn features(&self, image: &Grid<T>, cfg: &ModelConfig) -> Result<FeatureCache<T>> {
        let p = &cfg.pyramid;
        let patches = embed_patches(image, p.stride, p.patch_grid, p.context_radius, p.context_grid)?;
        let mut x = vec![linear_forward(&patches, &self.stem)?];
        for _ in 1..cfg.pyramid.levels {
            let next = avg_pool2(x.last().expect("non-empty"))?;
            x.push(next);
        }
        let (p, extra_in, q) = fuse_pyramid(&x, &self.lateral, &self.output, &self.extra)?;
        Ok(FeatureCache { patches, x, p, extra_in, q })
    }

    /// Accumulates parameter gradients given `dL/dq` for every level.
    pub fn features_backward(&mut self, cache: &FeatureCache<T>, dq: Vec<Grid<T>>) -> Result<()> {
        let mut dx = fuse_pyramid_backward(
            &cache.x,
            &cache.p,
            &cache.extra_in,
            &mut self.lateral,
            &mut self.output,
            &mut self.extra,
            dq,
        )?;
        for l in (1..dx.len()).rev() {
            let d = avg_pool2_backward(&dx[l]);
            dx[l - 1].add_assign(&d)?;
        }
        linear_backward(&cache.patches, &mut self.stem, &dx[0])?;
        Ok(())
    }

    pub fn rpn_level(&self, q: &Grid<T>, iou_branch: bool) -> Result<(RpnLevelOutput<T>, HeadCache<T>)> {
        let mut h = q.clone();
        let mut lin_in = Vec::with_capacity(self.tower_linear.len());
        let mut norm_in = Vec::with_capacity(self.tower_linear.len());
        let mut relu_in = Vec::with_capacity(self.tower_linear.len());
        for (lin, norm) in self.tower_linear.iter().zip(&self.tower_norm) {
            let a = linear_forward(&h, lin)?;
            let n = channel_norm_forward(&a, self.norm_groups, norm)?;
            lin_in.push(std::mem::replace(&mut h, relu_forward(&n)));
            norm_in.push(a);
            relu_in.push(n);
        }
        let out = RpnLevelOutput {
            obj: linear_forward(&h, &self.rpn_obj)?,
            iou: if iou_branch { Some(linear_forward(&h, &self.rpn_iou)?) } else { None },
            reg: linear_forward(&h, &self.rpn_reg)?,
        };
        Ok((out, HeadCache { lin_in, norm_in, relu_in, top: h }))
    }

    /// Returns `dL/dq` of one level.
    pub fn rpn_level_backward(
        &mut self,
        cache: &HeadCache<T>,
        d_obj: &Grid<T>,
        d_iou: Option<&Grid<T>>,
        d_reg: &Grid<T>,
    ) -> Result<Grid<T>> {
        let mut dh = linear_backward(&cache.top, &mut self.rpn_obj, d_obj)?;
        if let Some(d) = d_iou {
            dh.add_assign(&linear_backward(&cache.top, &mut self.rpn_iou, d)?)?;
        }
        dh.add_assign(&linear_backward(&cache.top, &mut self.rpn_reg, d_reg)?)?;
        for d in (0..self.tower_linear.len()).rev() {
            let dn = relu_backward(&cache.relu_in[d], &dh)?;
            let da = channel_norm_backward(&cache.norm_in[d], self.norm_groups, &mut self.tower_norm[d], &dn)?;
            dh = linear_backward(&cache.lin_in[d], &mut self.tower_linear[d], &da)?;
        }
        Ok(dh)
    }
}

/// Second-stage activations for a batch of RoI feature rows.
#[derive(Debug, Clone)]
pub struct RcnnCache<T> {
    input: Grid<T>,
    h1_pre: Grid<T>,
    h1: Grid<T>,
    h2_pre: Grid<T>,
    h2: Grid<T>,
}

/// Second-stage outputs: class logits (`C + 1`, background last) and deltas.
#[derive(Debug, Clone)]
pub struct RcnnOutput<T> {
    pub logits: Grid<T>,
    pub deltas: Grid<T>,
}

impl<T: Scalar> Network<T> {
    /// `rois` is an `(n, 1, roi_dim)` grid.
    pub fn rcnn(&self, rois: &Grid<T>) -> Result<(RcnnOutput<T>, RcnnCache<T>)> {
        let h1_pre = linear_forward(rois, &self.fc1)?;
        let h1 = relu_forward(&h1_pre);
        let h2_pre = linear_forward(&h1, &self.fc2)?;
        let h2 = relu_forward(&h2_pre);
        let out = RcnnOutput {
            logits: linear_forward(&h2, &self.cls)?,
            deltas: linear_forward(&h2, &self.reg)?,
        };
        Ok((out, RcnnCache { input: rois.clone(), h1_pre, h1, h2_pre, h2 }))
    }

    /// Returns `dL/d(roi features)`.
    pub fn rcnn_backward(&mut self, cache: &RcnnCache<T>, d_logits: &Grid<T>, d_deltas: &Grid<T>) -> Result<Grid<T>> {
        let mut dh2 = linear_backward(&cache.h2, &mut self.cls, d_logits)?;
        dh2.add_assign(&linear_backward(&cache.h2, &mut self.reg, d_deltas)?)?;
        let d2 = relu_backward(&cache.h2_pre, &dh2)?;
        let dh1 = linear_backward(&cache.h1, &mut self.fc2, &d2)?;
        let d1 = relu_backward(&cache.h1_pre, &dh1)?;
        linear_backward(&cache.input, &mut self.fc1, &d1)
    }
}
