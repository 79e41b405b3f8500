//! Per-feature PNS lower bounds and the causal-constraint penalty.
//!
//! For sample `i` with label `y` and feature `j`, let `p` be the model's
//! probability of `y` on the full feature vector and `q` the probability of
//! `y` with feature `j` occluded. Two bounds are available:
//!
//! * [`PnsVariant::Paper`]: `max(0, p - (1 - q))`, i.e. `P(Y = y) - P(Y_cf != y)`.
//! * [`PnsVariant::Pearl`]: `max(0, p - q)`, the classical bound.
//!
//! Both are clamped below at `epsilon` so the log penalty stays finite.

use ndarray::{Array1, Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CLAMP_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PnsVariant {
    #[default]
    Paper,
    Pearl,
}

impl PnsVariant {
    /// Sign with which the counterfactual probability enters the bound.
    pub(crate) fn counterfactual_sign(self) -> f64 {
        match self {
            PnsVariant::Paper => 1.0,
            PnsVariant::Pearl => -1.0,
        }
    }

    /// Unclamped bound, before `max(0, .)`.
    pub(crate) fn raw(self, p_orig: f64, p_cf: f64) -> f64 {
        match self {
            PnsVariant::Paper => p_orig - (1.0 - p_cf),
            PnsVariant::Pearl => p_orig - p_cf,
        }
    }
}

impl std::str::FromStr for PnsVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(PnsVariant::Paper),
            "pearl" => Ok(PnsVariant::Pearl),
            other => Err(Error::InvalidArgument(format!(
                "unknown PNS variant {other:?} (expected paper or pearl)"
            ))),
        }
    }
}

/// Clamped lower bounds, one per (sample, feature).
#[derive(Debug, Clone, PartialEq)]
pub struct PnsBounds {
    lb: Array2<f64>,
    clamped: Array2<bool>,
    variant: PnsVariant,
    clamp_epsilon: f64,
}

impl PnsBounds {
    pub fn lb(&self) -> ArrayView2<'_, f64> {
        self.lb.view()
    }

    /// True where the unclamped bound fell below epsilon (zero gradient there).
    pub fn clamped(&self) -> ArrayView2<'_, bool> {
        self.clamped.view()
    }

    pub fn variant(&self) -> PnsVariant {
        self.variant
    }

    pub fn clamp_epsilon(&self) -> f64 {
        self.clamp_epsilon
    }

    /// Mean bound per feature over samples.
    pub fn feature_means(&self) -> Array1<f64> {
        self.lb.mean_axis(ndarray::Axis(0)).expect("n >= 1")
    }
}

pub(crate) fn check_epsilon(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 0.1) {
        return Err(Error::InvalidArgument(format!(
            "clamp epsilon must lie in (0, 0.1], got {eps}"
        )));
    }
    Ok(())
}

pub fn pns_lower_bound(
    probs_orig: ArrayView2<'_, f64>,
    probs_cf: ArrayView3<'_, f64>,
    labels: &[usize],
    variant: PnsVariant,
    clamp_epsilon: f64,
) -> Result<PnsBounds> {
    check_epsilon(clamp_epsilon)?;
    let (n, c) = probs_orig.dim();
    let (n_cf, h, c_cf) = probs_cf.dim();
    if n_cf != n || labels.len() != n {
        return Err(Error::DimensionMismatch {
            context: "pns sample count",
            expected: n,
            actual: if n_cf != n { n_cf } else { labels.len() },
        });
    }
    if c_cf != c {
        return Err(Error::DimensionMismatch {
            context: "pns class count",
            expected: c,
            actual: c_cf,
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidArgument(format!("label {y} out of range for {c} classes")));
    }

    let mut lb = Array2::<f64>::zeros((n, h));
    let mut clamped = Array2::from_elem((n, h), false);
    for (i, &y) in labels.iter().enumerate() {
        let p = probs_orig[[i, y]];
        for j in 0..h {
            let raw = variant.raw(p, probs_cf[[i, j, y]]).max(0.0);
            if raw < clamp_epsilon {
                lb[[i, j]] = clamp_epsilon;
                clamped[[i, j]] = true;
            } else {
                lb[[i, j]] = raw.min(1.0);
            }
        }
    }
    Ok(PnsBounds {
        lb,
        clamped,
        variant,
        clamp_epsilon,
    })
}

/// Per-sample `-(1/h) * sum_j log lb(i, j)` and its mean over samples.
pub fn pns_penalty(bounds: &PnsBounds) -> (Array1<f64>, f64) {
    let h = bounds.lb.ncols() as f64;
    let per_sample: Array1<f64> = bounds
        .lb
        .rows()
        .into_iter()
        .map(|row| -row.iter().map(|v| v.ln()).sum::<f64>() / h)
        .collect();
    let total = per_sample.mean().expect("n >= 1");
    (per_sample, total)
}
