use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Trainable tensor pair (weights, biases) with gradient accumulators and
/// momentum buffers of identical shape.
///
/// For a per-cell linear map `weights` is `out_dim x in_dim` row-major; for a
/// channel normalization it holds the per-channel scale and `biases` the shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<T>,
    pub biases: Vec<T>,
    pub grad_weights: Vec<T>,
    pub grad_biases: Vec<T>,
    pub momentum_weights: Vec<T>,
    pub momentum_biases: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize, weights: Vec<T>, biases: Vec<T>) -> Result<Self> {
        let name = name.into();
        if biases.len() != out_dim || (weights.len() != in_dim * out_dim && weights.len() != out_dim) {
            return Err(Error::Config(format!(
                "`{name}`: {} weights / {} biases do not fit {in_dim}->{out_dim}",
                weights.len(),
                biases.len()
            )));
        }
        let nw = weights.len();
        Ok(Self {
            name,
            in_dim,
            out_dim,
            weights,
            biases,
            grad_weights: vec![T::zero(); nw],
            grad_biases: vec![T::zero(); out_dim],
            momentum_weights: vec![T::zero(); nw],
            momentum_biases: vec![T::zero(); out_dim],
        })
    }

    /// Per-cell linear map with uniform `±sqrt(6 / (fan_in + fan_out))` weights and zero bias.
    pub fn xavier<R: Rng + ?Sized>(name: impl Into<String>, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        Self::new(name, in_dim, out_dim, weights, vec![T::zero(); out_dim]).expect("shapes by construction")
    }

    /// Scale/shift pair of a channel normalization, initialised to identity affine.
    pub fn affine(name: impl Into<String>, channels: usize) -> Self {
        Self::new(name, channels, channels, vec![T::one(); channels], vec![T::zero(); channels])
            .expect("shapes by construction")
    }

    pub fn zeros(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self::new(name, in_dim, out_dim, vec![T::zero(); in_dim * out_dim], vec![T::zero(); out_dim])
            .expect("shapes by construction")
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad_weights.iter_mut().for_each(|g| *g = T::zero());
        self.grad_biases.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).all(|v| v.is_finite())
    }

    /// Flat view of all trainable values: weights then biases.
    pub fn flat_get(&self, i: usize) -> T {
        if i < self.weights.len() {
            self.weights[i]
        } else {
            self.biases[i - self.weights.len()]
        }
    }

    pub fn flat_set(&mut self, i: usize, v: T) {
        if i < self.weights.len() {
            self.weights[i] = v;
        } else {
            let nw = self.weights.len();
            self.biases[i - nw] = v;
        }
    }

    pub fn flat_grad(&self, i: usize) -> T {
        if i < self.grad_weights.len() {
            self.grad_weights[i]
        } else {
            self.grad_biases[i - self.grad_weights.len()]
        }
    }
}
