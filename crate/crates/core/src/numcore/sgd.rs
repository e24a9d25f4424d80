use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::params::LayerParams;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global L2 gradient-norm clip applied before the update.
    pub max_grad_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            max_grad_norm: None,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if let Some(m) = self.max_grad_norm {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::Config(format!("max_grad_norm must be > 0, got {m}")));
            }
        }
        Ok(())
    }

    pub fn with_learning_rate(&self, learning_rate: f64) -> Self {
        Self { learning_rate, ..*self }
    }
}

/// Joint L2 norm of all accumulated gradients.
pub fn grad_norm<T: Scalar>(params: &[&mut LayerParams<T>]) -> T {
    params
        .iter()
        .flat_map(|p| p.grad_weights.iter().chain(&p.grad_biases))
        .fold(T::zero(), |acc, &g| acc + g * g)
        .sqrt()
}

/// Scales every accumulated gradient so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut [&mut LayerParams<T>], max_norm: f64) -> T {
    let norm = grad_norm(params);
    let max = T::lit(max_norm);
    if norm > max {
        let scale = max / norm;
        for p in params.iter_mut() {
            for g in p.grad_weights.iter_mut().chain(p.grad_biases.iter_mut()) {
                *g = *g * scale;
            }
        }
    }
    norm
}

/// Classic momentum SGD with L2 weight decay folded into the gradient:
/// `buf = momentum * buf + (grad + wd * w)`, `w -= lr * buf`.
/// Gradient accumulators are cleared afterwards.
pub fn sgd_step<T: Scalar>(params: &mut LayerParams<T>, cfg: &SgdConfig) -> Result<()> {
    if let Some(i) = params
        .grad_weights
        .iter()
        .chain(&params.grad_biases)
        .position(|g| !g.is_finite())
    {
        return Err(Error::training(
            params.name.clone(),
            format!("non-finite gradient at flat index {i}"),
        ));
    }
    let lr = T::lit(cfg.learning_rate);
    let mom = T::lit(cfg.momentum);
    let wd = T::lit(cfg.weight_decay);
    let update = |w: &mut [T], g: &mut [T], buf: &mut [T]| {
        for ((w, g), b) in w.iter_mut().zip(g.iter_mut()).zip(buf.iter_mut()) {
            *b = mom * *b + (*g + wd * *w);
            *w = *w - lr * *b;
            *g = T::zero();
        }
    };
    update(&mut params.weights, &mut params.grad_weights, &mut params.momentum_weights);
    update(&mut params.biases, &mut params.grad_biases, &mut params.momentum_biases);
    if !params.all_finite() {
        return Err(Error::training(params.name.clone(), "parameters became non-finite"));
    }
    Ok(())
}
