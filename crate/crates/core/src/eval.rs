//! Group-aware metrics and occlusion attribution.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use ndarray::{s, Array2, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{encode, head_probs, Encoder};
use crate::types::{ClassifierHead, LabeledDataset, RngSeed};

/// Occlusion attribution is averaged over at most this many test samples.
pub const ATTRIBUTION_SAMPLE_SIZE: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_accuracy: f64,
    pub worst_group_accuracy: f64,
    pub per_group_accuracy: BTreeMap<usize, f64>,
    pub group_sizes: BTreeMap<usize, usize>,
}

impl MetricsReport {
    /// Aligned plain-text table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:>6}  {:>8}  {:>8}", "group", "size", "accuracy").unwrap();
        for (g, acc) in &self.per_group_accuracy {
            writeln!(out, "{:>6}  {:>8}  {:>8.4}", g, self.group_sizes[g], acc).unwrap();
        }
        writeln!(out, "{:>6}  {:>8}  {:>8.4}", "mean", self.group_sizes.values().sum::<usize>(), self.mean_accuracy).unwrap();
        writeln!(out, "{:>6}  {:>8}  {:>8.4}", "worst", "", self.worst_group_accuracy).unwrap();
        out
    }
}

pub fn group_metrics(preds: &[usize], labels: &[usize], group_ids: Option<&[usize]>) -> Result<MetricsReport> {
    let groups = group_ids.ok_or_else(|| Error::InvalidArgument("group metrics need group ids".into()))?;
    if preds.len() != labels.len() || groups.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "metrics inputs",
            expected: labels.len(),
            actual: if preds.len() != labels.len() { preds.len() } else { groups.len() },
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    let mut sizes = BTreeMap::<usize, usize>::new();
    let mut correct = BTreeMap::<usize, usize>::new();
    for ((&p, &y), &g) in preds.iter().zip(labels).zip(groups) {
        *sizes.entry(g).or_default() += 1;
        *correct.entry(g).or_default() += usize::from(p == y);
    }
    let per_group_accuracy: BTreeMap<usize, f64> = sizes
        .iter()
        .map(|(&g, &size)| (g, correct[&g] as f64 / size as f64))
        .collect();
    let worst = per_group_accuracy.values().copied().fold(f64::INFINITY, f64::min);
    let total_correct: usize = correct.values().sum();
    Ok(MetricsReport {
        mean_accuracy: total_correct as f64 / labels.len() as f64,
        worst_group_accuracy: worst,
        per_group_accuracy,
        group_sizes: sizes,
    })
}

/// Named, contiguous raw-input column ranges that together cover every column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub blocks: Vec<(String, Range<usize>)>,
}

impl BlockSpec {
    /// Causal block followed by the spurious block, as laid out by the generator.
    pub fn causal_spurious(causal_dim: usize, spurious_dim: usize) -> Self {
        Self {
            blocks: vec![
                ("causal".to_string(), 0..causal_dim),
                ("spurious".to_string(), causal_dim..causal_dim + spurious_dim),
            ],
        }
    }

    pub fn for_dataset(ds: &LabeledDataset) -> Self {
        let mut spec = Self::causal_spurious(ds.causal_dim(), ds.spurious_dim());
        spec.blocks.retain(|(_, r)| !r.is_empty());
        spec
    }

    /// Parses `name=start..end,name=start..end`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed block spec {text:?}"));
        let blocks = text
            .split(',')
            .map(|part| {
                let (name, range) = part.split_once('=').ok_or_else(bad)?;
                let (start, end) = range.split_once("..").ok_or_else(bad)?;
                let start = start.trim().parse().map_err(|_| bad())?;
                let end = end.trim().parse().map_err(|_| bad())?;
                Ok((name.trim().to_string(), start..end))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    /// The blocks must be non-empty, non-overlapping and cover `0..width`.
    pub fn validate(&self, width: usize) -> Result<()> {
        let mut covered = vec![false; width];
        for (name, range) in &self.blocks {
            if range.is_empty() || range.end > width {
                return Err(Error::InvalidArgument(format!(
                    "block {name} = {range:?} is empty or exceeds input width {width}"
                )));
            }
            for c in range.clone() {
                if std::mem::replace(&mut covered[c], true) {
                    return Err(Error::InvalidArgument(format!("block {name} overlaps column {c}")));
                }
            }
        }
        if let Some(c) = covered.iter().position(|&v| !v) {
            return Err(Error::InvalidArgument(format!("column {c} belongs to no block")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAttribution {
    pub block: String,
    /// Mean |change in p(class)| when the block is zeroed, indexed by class.
    pub per_class: Vec<f64>,
    /// Average of `per_class`.
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub samples: usize,
    pub blocks: Vec<BlockAttribution>,
}

impl AttributionReport {
    pub fn block(&self, name: &str) -> Option<&BlockAttribution> {
        self.blocks.iter().find(|b| b.block == name)
    }
}

/// Zeroes each raw-input block in turn on a seeded sample of up to
/// [`ATTRIBUTION_SAMPLE_SIZE`] instances and averages the absolute change in
/// class probabilities.
pub fn occlusion_attribution(
    encoder: &Encoder,
    head: &ClassifierHead,
    dataset: &LabeledDataset,
    block_spec: &BlockSpec,
    seed: RngSeed,
) -> Result<AttributionReport> {
    block_spec.validate(dataset.input_dim())?;
    let n = dataset.len();
    let take = n.min(ATTRIBUTION_SAMPLE_SIZE);
    let mut rows = sample(&mut seed.rng(), n, take).into_vec();
    rows.sort_unstable();
    let x = dataset.features_raw().select(Axis(0), &rows);
    let base = head_probs(head, &encode(encoder, x.view())?)?;

    let mut blocks = Vec::with_capacity(block_spec.blocks.len());
    for (name, range) in &block_spec.blocks {
        let mut occluded: Array2<f64> = x.clone();
        occluded.slice_mut(s![.., range.clone()]).fill(0.0);
        let probs = head_probs(head, &encode(encoder, occluded.view())?)?;
        let per_class: Vec<f64> = (&probs - &base)
            .mapv(f64::abs)
            .mean_axis(Axis(0))
            .expect("take >= 1")
            .to_vec();
        let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
        blocks.push(BlockAttribution {
            block: name.clone(),
            per_class,
            mean,
        });
    }
    Ok(AttributionReport { samples: take, blocks })
}
