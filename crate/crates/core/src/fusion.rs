//! Score composition between the two stages.
//!
//! The object prior is `sqrt(iou_pred * objectness)` and the final score of
//! class `c` is `sqrt(prior * cls(c))`. Both are geometric means; squaring
//! the final score recovers the marginal-probability product `prior * cls`.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// First-stage prior of a proposal.
#[inline]
pub fn prior<T: Scalar>(objectness: T, iou_pred: T) -> T {
    (iou_pred * objectness).max(T::zero()).sqrt()
}

/// Fused detection score.
#[inline]
pub fn fuse<T: Scalar>(prior: T, cls: T) -> T {
    (prior * cls).max(T::zero()).sqrt()
}

/// Scores carried by a final detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple<T> {
    pub prior: T,
    pub cls: T,
    /// The score detections are ranked by.
    pub fused: T,
}

impl<T: Scalar> ScoreTriple<T> {
    pub fn fused(prior: T, cls: T) -> Self {
        Self { prior, cls, fused: fuse(prior, cls) }
    }

    /// Ranking score override (classification-only or prior-only variants).
    pub fn with_rank_score(prior: T, cls: T, score: T) -> Self {
        Self { prior, cls, fused: score }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_values() {
        assert_eq!(prior(1.0f64, 1.0), 1.0);
        assert_eq!(prior(0.7f64, 0.0), 0.0);
        assert!((prior(0.64f64, 0.25) - 0.4).abs() < 1e-15);
        assert_eq!(fuse(1.0f64, 1.0), 1.0);
        assert_eq!(fuse(0.0f64, 0.99), 0.0);
        assert!((fuse(0.4f64, 0.9) - 0.6).abs() < 1e-15);
        assert!((fuse(0.4f32, 0.9) - 0.6).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn algebra(p in 0.0..=1.0f64, c in 0.0..=1.0f64) {
            let s = fuse(p, c);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert!((s * s - p * c).abs() <= 1e-12);
            prop_assert_eq!(s, fuse(c, p));
            prop_assert!(s >= p.min(c) - 1e-15 && s <= p.max(c) + 1e-15);
            prop_assert_eq!(s == 0.0, p * c == 0.0);
        }

        #[test]
        fn strictly_monotone(p in 0.01..=1.0f64, c in 0.01..=1.0f64, d in 0.001..0.5f64) {
            prop_assume!(p + d <= 1.0);
            prop_assert!(fuse(p + d, c) > fuse(p, c));
        }
    }
}
