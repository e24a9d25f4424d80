//! Boosting reweighting of second-stage classification samples by the
//! first-stage prior error, with norm-preserving normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{ordered_sum, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BrConfig {
    /// Boosting exponent; 0 reduces every weight to 1.
    pub omega: f64,
    pub normalize: bool,
}

impl Default for BrConfig {
    fn default() -> Self {
        Self { omega: 0.5, normalize: true }
    }
}

impl BrConfig {
    /// Uniform weights (plain classification loss).
    pub fn disabled() -> Self {
        Self { omega: 0.0, normalize: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::Config(format!("omega must be >= 0, got {}", self.omega)));
        }
        Ok(())
    }
}

/// `(1 - prior)^ω` for foreground samples, `prior^ω` for background, with `0^0 = 1`.
pub fn raw_weight<T: Scalar>(prior: T, is_foreground: bool, cfg: &BrConfig) -> T {
    let p = prior.max(T::zero()).min(T::one());
    let base = if is_foreground { T::one() - p } else { p };
    base.pow0(T::lit(cfg.omega))
}

/// Rescales `weights` so that `Σ w'·L = Σ L`. Falls back to all-ones when
/// `Σ w·L` is zero.
pub fn normalize_weights<T: Scalar>(weights: &[T], losses: &[T]) -> Result<Vec<T>> {
    if weights.len() != losses.len() {
        return Err(Error::Input(format!("{} weights for {} losses", weights.len(), losses.len())));
    }
    let total = ordered_sum(losses.iter().copied());
    let weighted = ordered_sum(weights.iter().zip(losses).map(|(&w, &l)| w * l));
    if weighted <= T::zero() || !weighted.is_finite() {
        return Ok(vec![T::one(); weights.len()]);
    }
    let scale = total / weighted;
    Ok(weights.iter().map(|&w| w * scale).collect())
}

/// One second-stage sample as seen by the reweighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrSample<T> {
    /// First-stage prior; a constant with respect to the gradient.
    pub prior: T,
    pub is_foreground: bool,
    /// Unweighted classification loss of the sample.
    pub cls_loss: T,
}

/// Raw weights followed by normalization when enabled.
pub fn br_weights<T: Scalar>(samples: &[BrSample<T>], cfg: &BrConfig) -> Result<Vec<T>> {
    cfg.validate()?;
    let raw: Vec<T> = samples
        .iter()
        .map(|s| raw_weight(s.prior, s.is_foreground, cfg))
        .collect();
    if !cfg.normalize {
        return Ok(raw);
    }
    let losses: Vec<T> = samples.iter().map(|s| s.cls_loss).collect();
    normalize_weights(&raw, &losses)
}
