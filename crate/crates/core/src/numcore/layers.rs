use crate::error::{Error, Result};
use crate::numcore::grid::Grid;
use crate::numcore::params::LayerParams;
use crate::scalar::Scalar;

/// Stabilizer added to the group variance.
pub const NORM_EPSILON: f64 = 1e-5;

/// `out[h, w, :] = W * in[h, w, :] + b` at every cell.
pub fn linear_forward<T: Scalar>(input: &Grid<T>, params: &LayerParams<T>) -> Result<Grid<T>> {
    check_linear(input, params)?;
    let (h, w, _) = input.shape();
    let (n_in, n_out) = (params.in_dim, params.out_dim);
    let mut out = Grid::zeros(h, w, n_out);
    for i in 0..input.cells() {
        let x = input.cell_flat(i);
        let y = out.cell_flat_mut(i);
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &params.weights[o * n_in..(o + 1) * n_in];
            let mut acc = params.biases[o];
            for (wv, xv) in row.iter().zip(x) {
                acc = acc + *wv * *xv;
            }
            *yo = acc;
        }
    }
    Ok(out)
}

/// Returns `dL/dinput` and accumulates `dL/dW`, `dL/db` into `params`.
pub fn linear_backward<T: Scalar>(input: &Grid<T>, params: &mut LayerParams<T>, upstream: &Grid<T>) -> Result<Grid<T>> {
    check_linear(input, params)?;
    if upstream.shape() != (input.height(), input.width(), params.out_dim) {
        return Err(Error::Config(format!(
            "`{}`: upstream gradient {:?} does not match output shape",
            params.name,
            upstream.shape()
        )));
    }
    let (h, w, _) = input.shape();
    let n_in = params.in_dim;
    let mut dx = Grid::zeros(h, w, n_in);
    for i in 0..input.cells() {
        let x = input.cell_flat(i);
        let dy = upstream.cell_flat(i);
        let dxi = dx.cell_flat_mut(i);
        for (o, &g) in dy.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            params.grad_biases[o] = params.grad_biases[o] + g;
            let row = &params.weights[o * n_in..(o + 1) * n_in];
            let grow = &mut params.grad_weights[o * n_in..(o + 1) * n_in];
            for k in 0..n_in {
                dxi[k] = dxi[k] + row[k] * g;
                grow[k] = grow[k] + g * x[k];
            }
        }
    }
    Ok(dx)
}

fn check_linear<T: Scalar>(input: &Grid<T>, params: &LayerParams<T>) -> Result<()> {
    if input.channels() != params.in_dim || params.weights.len() != params.in_dim * params.out_dim {
        return Err(Error::Config(format!(
            "`{}` maps {}->{} channels but input has {}",
            params.name,
            params.in_dim,
            params.out_dim,
            input.channels()
        )));
    }
    Ok(())
}

fn check_norm<T: Scalar>(input: &Grid<T>, groups: usize, params: &LayerParams<T>) -> Result<()> {
    let c = input.channels();
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!("{c} channels not divisible into {groups} groups")));
    }
    if params.weights.len() != c || params.biases.len() != c {
        return Err(Error::Config(format!(
            "`{}` has affine size {} for {c} channels",
            params.name,
            params.weights.len()
        )));
    }
    Ok(())
}

/// Per-cell group standardization followed by per-channel scale and shift.
pub fn channel_norm_forward<T: Scalar>(input: &Grid<T>, groups: usize, params: &LayerParams<T>) -> Result<Grid<T>> {
    check_norm(input, groups, params)?;
    let c = input.channels();
    let g = c / groups;
    let eps = T::lit(NORM_EPSILON);
    let inv_g = T::one() / T::from_usize_lossy(g);
    let mut out = Grid::zeros(input.height(), input.width(), c);
    for i in 0..input.cells() {
        let x = input.cell_flat(i);
        let y = out.cell_flat_mut(i);
        for grp in 0..groups {
            let xs = &x[grp * g..(grp + 1) * g];
            let mean = xs.iter().fold(T::zero(), |a, &v| a + v) * inv_g;
            let var = xs.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_g;
            let inv_std = T::one() / (var + eps).sqrt();
            for k in 0..g {
                let ch = grp * g + k;
                y[ch] = params.weights[ch] * (xs[k] - mean) * inv_std + params.biases[ch];
            }
        }
    }
    Ok(out)
}

pub fn channel_norm_backward<T: Scalar>(
    input: &Grid<T>,
    groups: usize,
    params: &mut LayerParams<T>,
    upstream: &Grid<T>,
) -> Result<Grid<T>> {
    check_norm(input, groups, params)?;
    if !upstream.same_shape(input) {
        return Err(Error::Config(format!("`{}`: upstream gradient shape mismatch", params.name)));
    }
    let c = input.channels();
    let g = c / groups;
    let eps = T::lit(NORM_EPSILON);
    let gf = T::from_usize_lossy(g);
    let inv_g = T::one() / gf;
    let mut dx = Grid::zeros(input.height(), input.width(), c);
    let mut xhat = vec![T::zero(); g];
    let mut dxhat = vec![T::zero(); g];
    for i in 0..input.cells() {
        let x = input.cell_flat(i);
        let dy = upstream.cell_flat(i);
        let dxi = dx.cell_flat_mut(i);
        for grp in 0..groups {
            let xs = &x[grp * g..(grp + 1) * g];
            let mean = xs.iter().fold(T::zero(), |a, &v| a + v) * inv_g;
            let var = xs.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_g;
            let inv_std = T::one() / (var + eps).sqrt();
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for k in 0..g {
                let ch = grp * g + k;
                xhat[k] = (xs[k] - mean) * inv_std;
                dxhat[k] = dy[ch] * params.weights[ch];
                params.grad_weights[ch] = params.grad_weights[ch] + dy[ch] * xhat[k];
                params.grad_biases[ch] = params.grad_biases[ch] + dy[ch];
                sum_dxhat = sum_dxhat + dxhat[k];
                sum_dxhat_xhat = sum_dxhat_xhat + dxhat[k] * xhat[k];
            }
            for k in 0..g {
                dxi[grp * g + k] = inv_std * inv_g * (gf * dxhat[k] - sum_dxhat - xhat[k] * sum_dxhat_xhat);
            }
        }
    }
    Ok(dx)
}

pub fn relu_forward<T: Scalar>(input: &Grid<T>) -> Grid<T> {
    input.map(|v| v.max(T::zero()))
}

pub fn relu_backward<T: Scalar>(input: &Grid<T>, upstream: &Grid<T>) -> Result<Grid<T>> {
    if !upstream.same_shape(input) {
        return Err(Error::Config("relu: upstream gradient shape mismatch".into()));
    }
    let mut dx = upstream.clone();
    for (d, &x) in dx.values_mut().iter_mut().zip(input.values()) {
        if x <= T::zero() {
            *d = T::zero();
        }
    }
    Ok(dx)
}

/// A differentiable stage with an activation cache.
///
/// `forward` pushes its input onto a stack and `backward` pops it, so a layer
/// shared across several inputs (pyramid levels) is differentiated by
/// calling `backward` in reverse order of the `forward` calls.
pub trait Layer<T: Scalar> {
    fn forward(&mut self, x: &Grid<T>) -> Result<Grid<T>>;
    /// Forward without caching; usable from shared references.
    fn infer(&self, x: &Grid<T>) -> Result<Grid<T>>;
    fn backward(&mut self, upstream: &Grid<T>) -> Result<Grid<T>>;
    fn params(&self) -> Option<&LayerParams<T>>;
    fn params_mut(&mut self) -> Option<&mut LayerParams<T>>;
    fn clear_cache(&mut self);
}

fn pop_cache<T>(cache: &mut Vec<Grid<T>>, what: &str) -> Result<Grid<T>> {
    cache
        .pop()
        .ok_or_else(|| Error::State(format!("{what}: backward called without a cached forward")))
}

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub params: LayerParams<T>,
    cache: Vec<Grid<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(params: LayerParams<T>) -> Self {
        Self { params, cache: Vec::new() }
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn forward(&mut self, x: &Grid<T>) -> Result<Grid<T>> {
        let y = linear_forward(x, &self.params)?;
        self.cache.push(x.clone());
        Ok(y)
    }

    fn infer(&self, x: &Grid<T>) -> Result<Grid<T>> {
        linear_forward(x, &self.params)
    }

    fn backward(&mut self, upstream: &Grid<T>) -> Result<Grid<T>> {
        let x = pop_cache(&mut self.cache, &self.params.name)?;
        linear_backward(&x, &mut self.params, upstream)
    }

    fn params(&self) -> Option<&LayerParams<T>> {
        Some(&self.params)
    }

    fn params_mut(&mut self) -> Option<&mut LayerParams<T>> {
        Some(&mut self.params)
    }

    fn clear_cache(&mut self) {
        self.cache.clear();
    }
}

#[derive(Debug, Clone)]
pub struct ChannelNorm<T> {
    pub groups: usize,
    pub params: LayerParams<T>,
    cache: Vec<Grid<T>>,
}

impl<T: Scalar> ChannelNorm<T> {
    pub fn new(groups: usize, params: LayerParams<T>) -> Result<Self> {
        let c = params.biases.len();
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!("{c} channels not divisible into {groups} groups")));
        }
        Ok(Self {
            groups,
            params,
            cache: Vec::new(),
        })
    }
}

impl<T: Scalar> Layer<T> for ChannelNorm<T> {
    fn forward(&mut self, x: &Grid<T>) -> Result<Grid<T>> {
        let y = channel_norm_forward(x, self.groups, &self.params)?;
        self.cache.push(x.clone());
        Ok(y)
    }

    fn infer(&self, x: &Grid<T>) -> Result<Grid<T>> {
        channel_norm_forward(x, self.groups, &self.params)
    }

    fn backward(&mut self, upstream: &Grid<T>) -> Result<Grid<T>> {
        let x = pop_cache(&mut self.cache, &self.params.name)?;
        channel_norm_backward(&x, self.groups, &mut self.params, upstream)
    }

    fn params(&self) -> Option<&LayerParams<T>> {
        Some(&self.params)
    }

    fn params_mut(&mut self) -> Option<&mut LayerParams<T>> {
        Some(&mut self.params)
    }

    fn clear_cache(&mut self) {
        self.cache.clear();
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    cache: Vec<Grid<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { cache: Vec::new() }
    }
}

impl<T: Scalar> Layer<T> for Relu<T> {
    fn forward(&mut self, x: &Grid<T>) -> Result<Grid<T>> {
        self.cache.push(x.clone());
        Ok(relu_forward(x))
    }

    fn infer(&self, x: &Grid<T>) -> Result<Grid<T>> {
        Ok(relu_forward(x))
    }

    fn backward(&mut self, upstream: &Grid<T>) -> Result<Grid<T>> {
        let x = pop_cache(&mut self.cache, "relu")?;
        relu_backward(&x, upstream)
    }

    fn params(&self) -> Option<&LayerParams<T>> {
        None
    }

    fn params_mut(&mut self) -> Option<&mut LayerParams<T>> {
        None
    }

    fn clear_cache(&mut self) {
        self.cache.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Grid<f64> {
        Grid::from_vec(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_linear_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_grid(&mut rng, 2, 3, 3);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let p = LayerParams::new("eye", 3, 3, eye, vec![0.0; 3]).unwrap();
        assert_eq!(linear_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn zero_weights_unit_bias_gives_ones() {
        let x = Grid::filled(2, 2, 3, 0.7);
        let p = LayerParams::new("b", 3, 2, vec![0.0; 6], vec![1.0; 2]).unwrap();
        let y = linear_forward(&x, &p).unwrap();
        assert!(y.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn linear_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_grid(&mut rng, 2, 2, 3);
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = LayerParams::new("l", 3, 2, w.clone(), b.clone()).unwrap();
        let y = linear_forward(&x, &p).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                for o in 0..2 {
                    let expect = b[o] + w[o * 3] * x.get(r, c, 0) + w[o * 3 + 1] * x.get(r, c, 1) + w[o * 3 + 2] * x.get(r, c, 2);
                    assert!((y.get(r, c, o) - expect).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn linear_shape_mismatch_is_config_error() {
        let p = LayerParams::<f64>::zeros("l", 4, 2);
        assert!(matches!(linear_forward(&Grid::zeros(1, 1, 3), &p), Err(Error::Config(_))));
    }

    #[test]
    fn norm_constant_input_yields_shift() {
        let mut p = LayerParams::affine("n", 4);
        p.biases = vec![0.1, 0.2, 0.3, 0.4];
        let y = channel_norm_forward(&Grid::filled(1, 2, 4, 3.0), 2, &p).unwrap();
        assert_eq!(y.cell(0, 1), &[0.1, 0.2, 0.3, 0.4]);
        // groups == channels: zero variance on every group
        let y = channel_norm_forward(&Grid::filled(1, 1, 4, -2.0), 4, &p).unwrap();
        assert_eq!(y.cell(0, 0), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn norm_standardizes_one_two_three_four() {
        let x = Grid::from_vec(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = channel_norm_forward(&x, 1, &LayerParams::affine("n", 4)).unwrap();
        // mean 2.5, population variance 1.25
        let s = (1.25f64 + NORM_EPSILON).sqrt();
        let expect = [-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s];
        for (a, b) in y.values().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let mean: f64 = y.values().iter().sum::<f64>() / 4.0;
        let var: f64 = y.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn norm_indivisible_groups_rejected() {
        let p = LayerParams::<f64>::affine("n", 6);
        assert!(matches!(channel_norm_forward(&Grid::zeros(1, 1, 6), 4, &p), Err(Error::Config(_))));
        assert!(ChannelNorm::new(4, p).is_err());
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut l = Linear::new(LayerParams::<f64>::zeros("l", 2, 2));
        assert!(matches!(l.backward(&Grid::zeros(1, 1, 2)), Err(Error::State(_))));
        let mut r = Relu::<f64>::new();
        assert!(matches!(r.backward(&Grid::zeros(1, 1, 2)), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_grid(&mut rng, 2, 2, 4);
        let mut lin = Linear::new(LayerParams::xavier("l", 4, 3, &mut rng));
        lin.forward(&x).unwrap();
        let dx = lin.backward(&Grid::zeros(2, 2, 3)).unwrap();
        assert!(dx.values().iter().all(|&v| v == 0.0));
        assert!(lin.params.grad_weights.iter().all(|&v| v == 0.0));
        let mut norm = ChannelNorm::new(2, LayerParams::affine("n", 4)).unwrap();
        norm.forward(&x).unwrap();
        let dx = norm.backward(&Grid::zeros(2, 2, 4)).unwrap();
        assert!(dx.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_input_gradient_is_transpose_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_grid(&mut rng, 1, 2, 3);
        let mut p = LayerParams::xavier("l", 3, 2, &mut rng);
        let dy = random_grid(&mut rng, 1, 2, 2);
        let dx = linear_backward(&x, &mut p, &dy).unwrap();
        for cell in 0..2 {
            for i in 0..3 {
                let expect: f64 = (0..2).map(|o| p.weights[o * 3 + i] * dy.cell_flat(cell)[o]).sum();
                assert!((dx.cell_flat(cell)[i] - expect).abs() < 1e-14);
            }
        }
    }
}
