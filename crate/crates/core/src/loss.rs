//! Soft dice co-segmentation loss with its closed-form gradient.
//!
//! For every target `m'` the soft dice term is
//! `(2·Σ p·g + ε) / (Σ p + Σ g + ε)` and the loss is the negated sum of
//! the terms, so a perfect co-segmentation of two targets scores −2.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::volume::Target;

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("prediction and mask target sets differ: {preds:?} vs {masks:?}")]
    TargetMismatch { preds: Vec<Target>, masks: Vec<Target> },
    #[error("target {target}: prediction shape {pred:?} differs from mask shape {mask:?}")]
    ShapeMismatch {
        target: Target,
        pred: [usize; 4],
        mask: [usize; 4],
    },
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Loss value and `∂L/∂p` per target.
#[derive(Debug, Clone)]
pub struct DiceLoss<T> {
    pub value: T,
    /// Soft dice term per target (in `[0, 1]` for probabilities in `[0, 1]`).
    pub terms: BTreeMap<Target, T>,
    pub grads: BTreeMap<Target, Tensor<T>>,
}

/// Soft dice term of one target and its gradient with respect to `pred`
/// (gradient of the term itself, not of the negated loss).
pub fn soft_dice_term<T: Real>(pred: &[T], mask: &[T], epsilon: f64) -> (f64, Vec<T>) {
    let (mut inter, mut sp, mut sg) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &g) in pred.iter().zip(mask) {
        let (p, g) = (p.to_f64_lossy(), g.to_f64_lossy());
        inter += p * g;
        sp += p;
        sg += g;
    }
    let num = 2.0 * inter + epsilon;
    let den = sp + sg + epsilon;
    let term = num / den;
    // d(num/den)/dp_i = (2 g_i · den − num) / den²
    let inv = 1.0 / (den * den);
    let grad = mask
        .iter()
        .map(|&g| T::from_f64_lossy((2.0 * g.to_f64_lossy() * den - num) * inv))
        .collect();
    (term, grad)
}

/// Combined loss `L = −Σ_targets dice_term`, differentiable in `preds`.
pub fn dice_loss<T: Real>(
    preds: &BTreeMap<Target, Tensor<T>>,
    masks: &BTreeMap<Target, Tensor<T>>,
    cfg: &LossConfig,
) -> Result<DiceLoss<T>, LossError> {
    if !(cfg.epsilon > 0.0) {
        return Err(LossError::BadEpsilon(cfg.epsilon));
    }
    if !preds.keys().eq(masks.keys()) {
        return Err(LossError::TargetMismatch {
            preds: preds.keys().copied().collect(),
            masks: masks.keys().copied().collect(),
        });
    }
    let mut value = 0.0f64;
    let mut terms = BTreeMap::new();
    let mut grads = BTreeMap::new();
    for (target, p) in preds {
        let g = &masks[target];
        if p.shape() != g.shape() {
            return Err(LossError::ShapeMismatch {
                target: *target,
                pred: p.shape(),
                mask: g.shape(),
            });
        }
        let (term, dterm) = soft_dice_term(p.data(), g.data(), cfg.epsilon);
        value -= term;
        terms.insert(*target, T::from_f64_lossy(term));
        let neg: Vec<T> = dterm.into_iter().map(|d| -d).collect();
        grads.insert(*target, Tensor::from_vec(p.channels(), p.spatial(), neg));
    }
    Ok(DiceLoss {
        value: T::from_f64_lossy(value),
        terms,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(1, [v.len(), 1, 1], v.to_vec())
    }

    fn both(p: &[f64], g: &[f64]) -> (BTreeMap<Target, Tensor<f64>>, BTreeMap<Target, Tensor<f64>>) {
        let preds = Target::ALL.iter().map(|&k| (k, t(p))).collect();
        let masks = Target::ALL.iter().map(|&k| (k, t(g))).collect();
        (preds, masks)
    }

    #[test]
    fn perfect_prediction_scores_minus_two() {
        let g = [0.0, 1.0, 1.0, 0.0, 1.0];
        let (p, m) = both(&g, &g);
        let l = dice_loss(&p, &m, &LossConfig::default()).unwrap();
        assert!((l.value + 2.0).abs() < 1e-6);
    }

    #[test]
    fn empty_prediction_and_mask_is_epsilon_limit() {
        let z = [0.0; 8];
        let (p, m) = both(&z, &z);
        let l = dice_loss(&p, &m, &LossConfig::default()).unwrap();
        assert_eq!(l.value, -2.0);
    }

    #[test]
    fn half_overlap_single_target() {
        let g = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let p = [1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let preds = BTreeMap::from([(Target::PET, t(&p))]);
        let masks = BTreeMap::from([(Target::PET, t(&g))]);
        let l = dice_loss(&preds, &masks, &LossConfig::default()).unwrap();
        assert!((l.value + 0.5).abs() < 1e-5);
    }

    #[test]
    fn mismatches_are_errors() {
        let preds = BTreeMap::from([(Target::PET, t(&[0.5, 0.5]))]);
        let masks = BTreeMap::from([(Target::T2, t(&[1.0, 0.0]))]);
        assert!(matches!(
            dice_loss(&preds, &masks, &LossConfig::default()),
            Err(LossError::TargetMismatch { .. })
        ));
        let masks = BTreeMap::from([(Target::PET, t(&[1.0, 0.0, 0.0]))]);
        assert!(matches!(
            dice_loss(&preds, &masks, &LossConfig::default()),
            Err(LossError::ShapeMismatch { .. })
        ));
        let masks = BTreeMap::from([(Target::PET, t(&[1.0, 0.0]))]);
        assert!(dice_loss(&preds, &masks, &LossConfig { epsilon: 0.0 }).is_err());
    }

    #[test]
    fn target_order_does_not_matter() {
        let a = [0.2, 0.9, 0.4];
        let b = [0.7, 0.1, 0.3];
        let g1 = [1.0, 1.0, 0.0];
        let g2 = [0.0, 1.0, 1.0];
        let forward = (
            BTreeMap::from([(Target::T2, t(&a)), (Target::PET, t(&b))]),
            BTreeMap::from([(Target::T2, t(&g1)), (Target::PET, t(&g2))]),
        );
        let mut preds = BTreeMap::new();
        preds.insert(Target::PET, t(&b));
        preds.insert(Target::T2, t(&a));
        let mut masks = BTreeMap::new();
        masks.insert(Target::PET, t(&g2));
        masks.insert(Target::T2, t(&g1));
        let l1 = dice_loss(&forward.0, &forward.1, &LossConfig::default()).unwrap();
        let l2 = dice_loss(&preds, &masks, &LossConfig::default()).unwrap();
        assert_eq!(l1.value, l2.value);
    }
}
