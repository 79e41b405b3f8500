//! Loss terms with hand-derived gradients.
//!
//! * weighted cross-entropy `(1/n) * sum_i w_i * (-log p_i(y_i))`
//! * DeCov: `0.5 * (||Cov||_F^2 - ||diag Cov||^2)` with `Cov = (1/n) Fc^T Fc`
//!   over the column-centered batch `Fc`
//! * the retraining objective `(1/n) * sum_i w_i * (CE_i + lambda * pen_i)`,
//!   where `pen_i = -(1/h) * sum_j log lb(i, j)` is the PNS penalty

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{counterfactual_probs, head_probs};
use crate::pns::{pns_lower_bound, pns_penalty, PnsVariant};
use crate::types::{ClassifierHead, FeatureMatrix};

/// Components of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Weighted mean cross-entropy.
    pub cross_entropy: f64,
    pub decov: f64,
    /// Unweighted mean PNS penalty over the batch.
    pub pns_penalty: f64,
    pub beta: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct CeGrad {
    pub loss: f64,
    pub grad_weights: Array2<f64>,
    pub grad_bias: Array1<f64>,
    pub grad_features: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadGrad {
    pub breakdown: LossBreakdown,
    pub grad_weights: Array2<f64>,
    pub grad_bias: Array1<f64>,
}

pub(crate) fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            context: "sample weights",
            expected: n,
            actual: weights.len(),
        });
    }
    if let Some(&w) = weights.iter().find(|&&w| !(w >= 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "sample weights must be finite and non-negative, found {w}"
        )));
    }
    Ok(())
}

fn check_labels(labels: &[usize], n: usize, c: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            context: "labels",
            expected: n,
            actual: labels.len(),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidArgument(format!("label {y} out of range for {c} classes")));
    }
    Ok(())
}

/// Gradient of the weighted mean CE with respect to the logits, plus the loss.
fn ce_logit_grad(probs: &Array2<f64>, labels: &[usize], weights: &[f64]) -> (f64, Array2<f64>) {
    let n = labels.len() as f64;
    let mut grad = probs.clone();
    let mut loss = 0.0;
    for (i, (mut row, &y)) in grad.rows_mut().into_iter().zip(labels).enumerate() {
        loss += weights[i] * -probs[[i, y]].ln();
        row[y] -= 1.0;
        row *= weights[i] / n;
    }
    (loss / n, grad)
}

pub fn ce_loss_grad(
    head: &ClassifierHead,
    features: &FeatureMatrix,
    labels: &[usize],
    sample_weights: &[f64],
) -> Result<CeGrad> {
    let n = features.n_samples();
    check_weights(sample_weights, n)?;
    check_labels(labels, n, head.class_count())?;
    let probs = head_probs(head, features)?;
    let (loss, g_logits) = ce_logit_grad(&probs, labels, sample_weights);
    Ok(CeGrad {
        loss,
        grad_weights: features.values().t().dot(&g_logits),
        grad_bias: g_logits.sum_axis(Axis(0)),
        grad_features: g_logits.dot(&head.weights.t()),
    })
}

fn decov_of(values: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
    let n = values.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "DeCov needs at least 2 samples, got {n}"
        )));
    }
    let mean = values.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &values - &mean;
    let nf = n as f64;
    let mut cov = centered.t().dot(&centered) / nf;
    let diag_sq: f64 = cov.diag().iter().map(|v| v * v).sum();
    let total_sq: f64 = cov.iter().map(|v| v * v).sum();
    let penalty = 0.5 * (total_sq - diag_sq);
    cov.diag_mut().fill(0.0);
    // Columns of the centered batch sum to zero, so no re-centering is needed.
    let grad = centered.dot(&cov) * (2.0 / nf);
    Ok((penalty.max(0.0), grad))
}

pub fn decov_penalty_grad(features: &FeatureMatrix) -> Result<(f64, Array2<f64>)> {
    decov_of(features.values())
}

/// Options for the retraining objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Options {
    pub lambda: f64,
    pub variant: PnsVariant,
    pub clamp_epsilon: f64,
}

pub fn stage2_loss_grad(
    head: &ClassifierHead,
    features: &FeatureMatrix,
    labels: &[usize],
    sample_weights: &[f64],
    opts: Stage2Options,
) -> Result<HeadGrad> {
    if !(opts.lambda >= 0.0 && opts.lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be finite and >= 0, got {}",
            opts.lambda
        )));
    }
    let n = features.n_samples();
    let h = features.feature_dim();
    check_weights(sample_weights, n)?;
    check_labels(labels, n, head.class_count())?;

    let probs = head_probs(head, features)?;
    let cf = counterfactual_probs(head, features)?;
    let bounds = pns_lower_bound(probs.view(), cf.view(), labels, opts.variant, opts.clamp_epsilon)?;
    let (per_sample_penalty, mean_penalty) = pns_penalty(&bounds);

    let (ce, mut g_logits) = ce_logit_grad(&probs, labels, sample_weights);
    let mut breakdown = LossBreakdown {
        total: ce,
        cross_entropy: ce,
        decov: 0.0,
        pns_penalty: mean_penalty,
        beta: 0.0,
        lambda: opts.lambda,
    };
    if opts.lambda == 0.0 {
        return Ok(HeadGrad {
            breakdown,
            grad_weights: features.values().t().dot(&g_logits),
            grad_bias: g_logits.sum_axis(Axis(0)),
        });
    }

    let nf = n as f64;
    let weighted_penalty: f64 = per_sample_penalty
        .iter()
        .zip(sample_weights)
        .map(|(p, w)| w * p)
        .sum::<f64>()
        / nf;
    breakdown.total = ce + opts.lambda * weighted_penalty;

    // d(-log lb)/d lb = -1/lb on unclamped entries; d lb = d p + sign * d q.
    let sign = opts.variant.counterfactual_sign();
    let lb = bounds.lb();
    let clamped = bounds.clamped();
    let f = features.values();
    let c = head.class_count();
    let mut cf_logit_sum = Array2::<f64>::zeros((n, c));
    let mut grad_weights = Array2::<f64>::zeros((h, c));
    for (i, &y) in labels.iter().enumerate() {
        let alpha = opts.lambda * sample_weights[i] / (h as f64 * nf);
        if alpha == 0.0 {
            continue;
        }
        let mut inv_sum = 0.0;
        for j in 0..h {
            if clamped[[i, j]] {
                continue;
            }
            let coef = -alpha * sign / lb[[i, j]];
            inv_sum += 1.0 / lb[[i, j]];
            let q_y = cf[[i, j, y]];
            for k in 0..c {
                let indicator = if k == y { 1.0 } else { 0.0 };
                let g = coef * q_y * (indicator - cf[[i, j, k]]);
                cf_logit_sum[[i, k]] += g;
                // Feature j is absent from its own counterfactual logits.
                grad_weights[[j, k]] -= f[[i, j]] * g;
            }
        }
        if inv_sum > 0.0 {
            let p_y = probs[[i, y]];
            for k in 0..c {
                let indicator = if k == y { 1.0 } else { 0.0 };
                g_logits[[i, k]] += -alpha * inv_sum * p_y * (indicator - probs[[i, k]]);
            }
        }
    }
    g_logits += &cf_logit_sum;
    grad_weights += &f.t().dot(&g_logits);
    Ok(HeadGrad {
        breakdown,
        grad_weights,
        grad_bias: g_logits.sum_axis(Axis(0)),
    })
}

/// Weighted objective from per-sample CE and PNS penalty terms.
pub fn stage2_objective(ce: &[f64], penalty: &[f64], weights: &[f64], lambda: f64) -> f64 {
    let n = ce.len() as f64;
    ce.iter()
        .zip(penalty)
        .zip(weights)
        .map(|((c, p), w)| w * (c + lambda * p))
        .sum::<f64>()
        / n
}
