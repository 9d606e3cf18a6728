//! Auxiliary losses for mined unknown objects and the incremental loss
//! that drives gate training.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{diou3d, Box3};

/// Probability clamp for the BCE term.
pub const PROB_EPS: f64 = 1e-7;
/// Dice smoothing constant.
pub const DICE_SMOOTH: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("supervision region is empty")]
    EmptyRegion,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("feature {0} has zero or non-finite norm")]
    ZeroNormFeature(usize),
    #[error("normalizer must be positive, got {0}")]
    InvalidNormalizer(f64),
}

fn same_len(a: usize, b: usize, what: &str) -> Result<(), LossError> {
    if a == b {
        Ok(())
    } else {
        Err(LossError::ShapeMismatch(format!("{what}: {a} vs {b}")))
    }
}

/// Mean BCE plus soft Dice over the region where `region` is true.
///
/// Dice uses squared terms in the denominator,
/// `1 - (2Σpw + s) / (Σp² + Σw² + s)`, so it vanishes whenever `p = w`.
pub fn bce_dice_objectness(
    pred: &[f64],
    target: &[f64],
    region: &[bool],
) -> Result<f64, LossError> {
    same_len(pred.len(), target.len(), "pred/target")?;
    same_len(pred.len(), region.len(), "pred/region")?;
    let mut n = 0usize;
    let (mut bce, mut pw, mut pp, mut ww) = (0.0, 0.0, 0.0, 0.0);
    for ((&p, &w), _) in pred.iter().zip(target).zip(region).filter(|(_, &r)| r) {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        bce -= w * p.ln() + (1.0 - w) * (1.0 - p).ln();
        pw += p * w;
        pp += p * p;
        ww += w * w;
        n += 1;
    }
    if n == 0 {
        return Err(LossError::EmptyRegion);
    }
    let dice = 1.0 - (2.0 * pw + DICE_SMOOTH) / (pp + ww + DICE_SMOOTH);
    Ok(bce / n as f64 + dice)
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0 && na.is_finite() && nb.is_finite()) {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `(1/Z) Σ_e (1 - cos(f_e, f_j)) w_e`.
pub fn cosine_alignment_loss(
    members: &[&[f64]],
    instance: &[f64],
    weights: &[f64],
    z: f64,
) -> Result<f64, LossError> {
    same_len(members.len(), weights.len(), "members/weights")?;
    if z.is_nan() || z <= 0.0 {
        return Err(LossError::InvalidNormalizer(z));
    }
    let mut acc = 0.0;
    for (i, (f, w)) in members.iter().zip(weights).enumerate() {
        same_len(f.len(), instance.len(), "feature dim")?;
        let c = cosine(f, instance).ok_or(LossError::ZeroNormFeature(i))?;
        acc += (1.0 - c) * w;
    }
    Ok(acc / z)
}

/// `(1/Z) Σ_e (1 - DIoU(pred_e, target)) w_e`.
pub fn weighted_diou_regression(
    preds: &[Box3],
    target: &Box3,
    weights: &[f64],
    z: f64,
) -> Result<f64, LossError> {
    same_len(preds.len(), weights.len(), "preds/weights")?;
    if z.is_nan() || z <= 0.0 {
        return Err(LossError::InvalidNormalizer(z));
    }
    let acc: f64 = preds
        .iter()
        .zip(weights)
        .map(|(p, w)| (1.0 - diou3d(p, target)) * w)
        .sum();
    Ok(acc / z)
}

/// Mean over entries of `(1 - s) y + s (1 - y)`.
pub fn incremental_loss(scores: &[f64], target: &[f64]) -> Result<f64, LossError> {
    same_len(scores.len(), target.len(), "scores/target")?;
    if scores.is_empty() {
        return Err(LossError::ShapeMismatch("no classes".into()));
    }
    let sum: f64 = scores
        .iter()
        .zip(target)
        .map(|(s, y)| (1.0 - s) * y + s * (1.0 - y))
        .sum();
    Ok(sum / scores.len() as f64)
}

/// Batch incremental loss (mean over samples) and its gradient with respect
/// to the scores, `(1 - 2y) / (rows · cols)`.
pub fn incremental_loss_batch(
    scores: &Array2<f64>,
    target: &Array2<f64>,
) -> Result<(f64, Array2<f64>), LossError> {
    if scores.dim() != target.dim() {
        return Err(LossError::ShapeMismatch(format!(
            "scores {:?} vs target {:?}",
            scores.dim(),
            target.dim()
        )));
    }
    let count = scores.len();
    if count == 0 {
        return Err(LossError::ShapeMismatch("empty batch".into()));
    }
    let inv = 1.0 / count as f64;
    let loss = scores
        .iter()
        .zip(target.iter())
        .map(|(s, y)| (1.0 - s) * y + s * (1.0 - y))
        .sum::<f64>()
        * inv;
    let grad = target.mapv(|y| (1.0 - 2.0 * y) * inv);
    Ok((loss, grad))
}

/// Per-scene loss summary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub obj: f64,
    pub feat: f64,
    pub reg: f64,
    pub aux_total: f64,
    pub inc: f64,
    pub points: usize,
    pub boxes: usize,
}

/// Unweighted sum of the three auxiliary terms.
pub fn aux_total(obj: f64, feat: f64, reg: f64, points: usize, boxes: usize) -> LossReport {
    LossReport {
        obj,
        feat,
        reg,
        aux_total: obj + feat + reg,
        inc: 0.0,
        points,
        boxes,
    }
}
