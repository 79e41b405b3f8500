//! Propensity estimation and inverse-propensity sample weights.
//!
//! The default estimator splits every class into the samples the first-stage
//! model got right (treated as the majority stratum) and those it got wrong
//! (the minority stratum). Each of the resulting `2C` pseudo-groups gets the
//! propensity `|g| / n` and every sample the raw weight `1 / (2 * p_hat)`, so
//! every non-empty pseudo-group carries the same total weight `n / 2`.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    #[default]
    Ccr,
    Jtt,
    Afr,
    Oracle,
    None,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [
        Estimator::Ccr,
        Estimator::Jtt,
        Estimator::Afr,
        Estimator::Oracle,
        Estimator::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Ccr => "ccr",
            Estimator::Jtt => "jtt",
            Estimator::Afr => "afr",
            Estimator::Oracle => "oracle",
            Estimator::None => "none",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown estimator {s:?} (expected ccr, jtt, afr, oracle or none)"
                ))
            })
    }
}

/// Inferred pseudo-groups and their estimated propensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityTable {
    /// `2 * label + (0 if correct else 1)` per sample.
    pub pseudo_group_of: Vec<usize>,
    /// Fraction of the dataset in each pseudo-group; `None` for empty groups.
    pub p_hat: Vec<Option<f64>>,
    pub k_effective: usize,
    /// Lower limit applied to every propensity before inversion.
    pub min_propensity: f64,
}

impl PropensityTable {
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.p_hat.len()];
        for &g in &self.pseudo_group_of {
            sizes[g] += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    MeanOne,
    /// Exact inverse propensities (needed for unbiasedness).
    Unnormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub normalization: Normalization,
}

impl WeightVector {
    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![1.0; n],
            normalization: Normalization::MeanOne,
        }
    }

    fn mean_one(mut raw: Vec<f64>) -> Result<Self> {
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        if !(mean > 0.0 && mean.is_finite()) {
            return Err(Error::Divergence(format!("weight mean is {mean}")));
        }
        for w in &mut raw {
            *w /= mean;
        }
        Ok(Self {
            weights: raw,
            normalization: Normalization::MeanOne,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.weights.len() as f64
    }
}

fn check_aligned(a: usize, b: usize, context: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            context,
            expected: a,
            actual: b,
        });
    }
    if a == 0 {
        return Err(Error::Empty(format!("{context}: no samples")));
    }
    Ok(())
}

/// Pseudo-group id of one sample.
pub fn pseudo_group(label: usize, pred: usize) -> usize {
    2 * label + usize::from(pred != label)
}

pub fn estimate_propensity_ccr(stage1_preds: &[usize], labels: &[usize]) -> Result<PropensityTable> {
    check_aligned(labels.len(), stage1_preds.len(), "predictions vs labels")?;
    let n = labels.len();
    let classes = labels.iter().chain(stage1_preds).copied().max().unwrap_or(0) + 1;
    let pseudo_group_of: Vec<usize> = labels
        .iter()
        .zip(stage1_preds)
        .map(|(&y, &p)| pseudo_group(y, p))
        .collect();
    let mut sizes = vec![0usize; 2 * classes];
    for &g in &pseudo_group_of {
        sizes[g] += 1;
    }
    let p_hat = sizes
        .iter()
        .map(|&s| (s > 0).then(|| s as f64 / n as f64))
        .collect();
    Ok(PropensityTable {
        pseudo_group_of,
        p_hat,
        k_effective: 2,
        min_propensity: 1.0 / n as f64,
    })
}

/// Raw `1 / (K * p_hat)` per sample, before normalization.
pub fn raw_weights_from_propensity(table: &PropensityTable) -> Result<Vec<f64>> {
    if table.k_effective == 0 {
        return Err(Error::InvalidArgument("k_effective must be >= 1".into()));
    }
    let k = table.k_effective as f64;
    table
        .pseudo_group_of
        .iter()
        .map(|&g| match table.p_hat.get(g).copied().flatten() {
            Some(p) if p > 0.0 => Ok(1.0 / (k * p.max(table.min_propensity))),
            _ => Err(Error::InvalidArgument(format!(
                "pseudo-group {g} is occupied but has no positive propensity"
            ))),
        })
        .collect()
}

pub fn weights_from_propensity(table: &PropensityTable) -> Result<WeightVector> {
    WeightVector::mean_one(raw_weights_from_propensity(table)?)
}

/// Error-set upweighting: misclassified samples get `upweight`, others 1.
pub fn weights_jtt(stage1_preds: &[usize], labels: &[usize], upweight: f64) -> Result<WeightVector> {
    check_aligned(labels.len(), stage1_preds.len(), "predictions vs labels")?;
    if !(upweight >= 1.0 && upweight.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "upweight must be finite and >= 1, got {upweight}"
        )));
    }
    let raw = labels
        .iter()
        .zip(stage1_preds)
        .map(|(y, p)| if y == p { 1.0 } else { upweight })
        .collect();
    WeightVector::mean_one(raw)
}

/// `exp(-gamma * p(y))`, rebalanced so each class keeps mass equal to its size.
pub fn weights_afr(stage1_probs: ArrayView2<'_, f64>, labels: &[usize], gamma: f64) -> Result<WeightVector> {
    check_aligned(labels.len(), stage1_probs.nrows(), "probabilities vs labels")?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gamma must be finite and >= 0, got {gamma}"
        )));
    }
    let c = stage1_probs.ncols();
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidArgument(format!("label {y} out of range for {c} classes")));
    }
    let mut raw: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| (-gamma * stage1_probs[[i, y]]).exp())
        .collect();
    let mut mass = vec![0.0; c];
    let mut count = vec![0usize; c];
    for (&y, &w) in labels.iter().zip(&raw) {
        mass[y] += w;
        count[y] += 1;
    }
    for (w, &y) in raw.iter_mut().zip(labels) {
        *w *= count[y] as f64 / mass[y];
    }
    WeightVector::mean_one(raw)
}

/// Exact inverse observation probabilities `1 / p_{j,k}(o = 1)`; not normalized.
pub fn weights_oracle(group_ids: &[usize], observation_probs: &[Vec<f64>], spurious_value_count: usize) -> Result<WeightVector> {
    if spurious_value_count == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if group_ids.is_empty() {
        return Err(Error::Empty("oracle weights: no samples".into()));
    }
    let weights = group_ids
        .iter()
        .map(|&g| {
            let (j, k) = (g / spurious_value_count, g % spurious_value_count);
            let p = observation_probs
                .get(j)
                .and_then(|row| row.get(k))
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("group {g} outside the probability table")))?;
            if p > 0.0 {
                Ok(1.0 / p)
            } else {
                Err(Error::InvalidArgument(format!(
                    "group {g} is occupied but has observation probability {p}"
                )))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightVector {
        weights,
        normalization: Normalization::Unnormalized,
    })
}

/// Writes `index,weight,pseudo_group` with 17 significant digits per weight.
pub fn write_weights_csv(path: impl AsRef<Path>, weights: &WeightVector, groups: Option<&[usize]>) -> Result<()> {
    let path = path.as_ref();
    if let Some(g) = groups {
        check_aligned(weights.len(), g.len(), "weights vs groups")?;
    }
    let mut out = Vec::with_capacity(32 * (weights.len() + 1));
    writeln!(out, "index,weight,pseudo_group").expect("write to Vec");
    for (i, w) in weights.weights.iter().enumerate() {
        match groups {
            Some(g) => writeln!(out, "{i},{w:.16e},{}", g[i]),
            None => writeln!(out, "{i},{w:.16e},"),
        }
        .expect("write to Vec");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads weights written by [`write_weights_csv`], in index order.
pub fn read_weights_csv(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("index,weight,pseudo_group") {
        return Err(Error::InvalidArgument(format!(
            "{}: missing weights CSV header",
            path.display()
        )));
    }
    let mut weights = Vec::new();
    for (row, line) in lines.enumerate() {
        let mut fields = line.split(',');
        let parse_err = || Error::InvalidArgument(format!("{}: malformed row {row}", path.display()));
        let index: usize = fields.next().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
        let weight: f64 = fields.next().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
        if index != row || !(weight >= 0.0 && weight.is_finite()) {
            return Err(parse_err());
        }
        weights.push(weight);
    }
    Ok(weights)
}
