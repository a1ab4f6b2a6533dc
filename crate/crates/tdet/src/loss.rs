//! Loss arithmetic on plain values: softmax cross entropy, smooth L1, and
//! the normalized joint objective combining them.
//!
//! The differentiable path in [`crate::autodiff`] computes the same
//! quantities node by node; these functions are the reference used for
//! reporting, testing, and evaluation-time scoring.

use crate::autodiff::Real;
use crate::error::{Error, Result};

/// Numerically stable softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    assert!(!logits.is_empty());
    let m = logits
        .iter()
        .fold(logits[0], |a, &b| if b > a { b } else { a });
    let exps: Vec<T> = logits.iter().map(|&v| (v - m).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross entropy of one row of logits against an integer target, computed
/// through a max-shifted log-sum-exp.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label: target,
            num_classes: logits.len(),
        });
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|&v| (v - m).exp()).sum();
    Ok(m + sum_exp.ln() - logits[target])
}

/// Smooth L1 penalty of a residual: quadratic inside the unit interval,
/// linear outside.
pub fn smooth_l1(residual: f64) -> f64 {
    let r = residual.abs();
    if r < 1.0 {
        0.5 * r * r
    } else {
        r - 0.5
    }
}

/// Breakdown of one joint objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossReport {
    /// Mean cross entropy over the sampled candidates.
    pub cls: f64,
    /// Mean smooth L1 over the positive candidates' offset pairs.
    pub reg: f64,
    /// `cls + lambda * reg`.
    pub total: f64,
    pub n_cls: usize,
    pub n_reg: usize,
}

/// Joint detection objective: the classification term averages cross entropy
/// over all sampled candidates, the regression term averages smooth L1 over
/// the positives only (both offset components summed per positive), and the
/// two are combined as `cls + lambda * reg`. With no positives the
/// regression term is zero.
pub fn joint_loss(
    cls_terms: &[(&[f64], usize)],
    reg_terms: &[([f64; 2], [f64; 2])],
    lambda: f64,
) -> Result<LossReport> {
    if cls_terms.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    let mut cls_sum = 0.0;
    for &(logits, target) in cls_terms {
        cls_sum += softmax_cross_entropy(logits, target)?;
    }
    let cls = cls_sum / cls_terms.len() as f64;

    let n_reg = reg_terms.len();
    let reg = if n_reg == 0 {
        0.0
    } else {
        let reg_sum: f64 = reg_terms
            .iter()
            .map(|&(pred, tgt)| smooth_l1(pred[0] - tgt[0]) + smooth_l1(pred[1] - tgt[1]))
            .sum();
        reg_sum / n_reg as f64
    };

    let total = cls + lambda * reg;
    if !total.is_finite() {
        return Err(Error::NonFinite("joint loss"));
    }
    Ok(LossReport {
        cls,
        reg,
        total,
        n_cls: cls_terms.len(),
        n_reg,
    })
}
