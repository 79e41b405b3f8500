//! Domain types shared across the crate.
//!
//! Everything here is an immutable value once constructed. Constructors
//! validate the invariants so downstream code can rely on them.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Generator used for every random draw in the crate.
pub type Rng = ChaCha8Rng;

/// Root of all randomness for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub const DEFAULT: RngSeed = RngSeed(42);

    pub fn rng(self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Derives an independent child seed for a named stream (splitmix64 finalizer).
    pub fn derive(self, stream: u64) -> RngSeed {
        let mut z = self
            .0
            .wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        RngSeed(z ^ (z >> 31))
    }
}

impl Default for RngSeed {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Raw inputs with labels and, for synthetic data, the true group structure.
///
/// The input columns are the causal block followed by the spurious block.
/// A group id encodes `(label j, spurious value k)` as `j * K + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features_raw: Array2<f64>,
    labels: Vec<usize>,
    group_ids: Option<Vec<usize>>,
    class_count: usize,
    spurious_value_count: Option<usize>,
    causal_dim: usize,
    spurious_dim: usize,
}

impl LabeledDataset {
    pub fn new(
        features_raw: Array2<f64>,
        labels: Vec<usize>,
        group_ids: Option<Vec<usize>>,
        class_count: usize,
        spurious_value_count: Option<usize>,
        causal_dim: usize,
        spurious_dim: usize,
    ) -> Result<Self> {
        let (n, d) = features_raw.dim();
        if n == 0 {
            return Err(Error::Empty("dataset has no samples".into()));
        }
        if d == 0 || causal_dim + spurious_dim != d {
            return Err(Error::DimensionMismatch {
                context: "dataset block widths",
                expected: d,
                actual: causal_dim + spurious_dim,
            });
        }
        if class_count < 2 {
            return Err(Error::InvalidArgument(format!(
                "class_count must be >= 2, got {class_count}"
            )));
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                context: "dataset labels",
                expected: n,
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if let Some(k) = spurious_value_count {
            if k < 2 {
                return Err(Error::InvalidArgument(format!(
                    "spurious_value_count must be >= 2, got {k}"
                )));
            }
        }
        if let Some(groups) = &group_ids {
            if groups.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "dataset group ids",
                    expected: n,
                    actual: groups.len(),
                });
            }
            if let Some(k) = spurious_value_count {
                for (&g, &y) in groups.iter().zip(&labels) {
                    if g >= class_count * k || g / k != y {
                        return Err(Error::InvalidArgument(format!(
                            "group id {g} inconsistent with label {y} (K = {k})"
                        )));
                    }
                }
            }
        }
        if features_raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite raw feature".into()));
        }
        Ok(Self {
            features_raw,
            labels,
            group_ids,
            class_count,
            spurious_value_count,
            causal_dim,
            spurious_dim,
        })
    }

    pub fn features_raw(&self) -> ArrayView2<'_, f64> {
        self.features_raw.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn group_ids(&self) -> Option<&[usize]> {
        self.group_ids.as_deref()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn spurious_value_count(&self) -> Option<usize> {
        self.spurious_value_count
    }

    pub fn causal_dim(&self) -> usize {
        self.causal_dim
    }

    pub fn spurious_dim(&self) -> usize {
        self.spurious_dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features_raw.ncols()
    }

    /// Sample counts per group id, indexed `0..C*K`. `None` without groups.
    pub fn group_counts(&self) -> Option<Vec<usize>> {
        let groups = self.group_ids.as_ref()?;
        let width = match self.spurious_value_count {
            Some(k) => self.class_count * k,
            None => groups.iter().copied().max().map_or(0, |g| g + 1),
        };
        let mut counts = vec![0; width];
        for &g in groups {
            counts[g] += 1;
        }
        Some(counts)
    }

    /// Rows selected by `keep`, in their original order.
    pub fn select(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.len() {
            return Err(Error::DimensionMismatch {
                context: "selection mask",
                expected: self.len(),
                actual: keep.len(),
            });
        }
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep[i]).collect();
        if rows.is_empty() {
            return Err(Error::Empty("selection keeps no samples".into()));
        }
        Self::new(
            self.features_raw.select(Axis(0), &rows),
            rows.iter().map(|&i| self.labels[i]).collect(),
            self.group_ids
                .as_ref()
                .map(|g| rows.iter().map(|&i| g[i]).collect()),
            self.class_count,
            self.spurious_value_count,
            self.causal_dim,
            self.spurious_dim,
        )
    }

    /// Wraps an ingested feature file as a dataset with a single input block.
    pub fn from_features(
        features: FeatureMatrix,
        labels: Vec<usize>,
        group_ids: Option<Vec<usize>>,
        class_count: usize,
    ) -> Result<Self> {
        let d = features.feature_dim();
        Self::new(features.into_inner(), labels, group_ids, class_count, None, d, 0)
    }
}

/// Frozen last-layer features, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(Array2<f64>);

impl FeatureMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::InvalidArgument("feature_dim must be >= 1".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature value".into()));
        }
        Ok(Self(values))
    }

    /// Skips the finiteness scan; for values produced by this crate's own kernels.
    pub(crate) fn from_trusted(values: Array2<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn n_samples(&self) -> usize {
        self.0.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.0.iter().all(|&v| v >= 0.0)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self(self.0.select(Axis(0), rows))
    }
}

/// The mask that drops exactly one feature (all other entries are kept).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterfactualMask {
    dropped_feature: usize,
}

impl CounterfactualMask {
    pub fn new(dropped_feature: usize, feature_dim: usize) -> Result<Self> {
        if dropped_feature >= feature_dim {
            return Err(Error::InvalidArgument(format!(
                "dropped feature {dropped_feature} out of range for width {feature_dim}"
            )));
        }
        Ok(Self { dropped_feature })
    }

    pub fn dropped_feature(&self) -> usize {
        self.dropped_feature
    }

    /// Elementwise product of the mask with `row`.
    pub fn apply(&self, row: ArrayView1<'_, f64>) -> Array1<f64> {
        let mut out = row.to_owned();
        out[self.dropped_feature] = 0.0;
        out
    }
}

/// Retrainable last layer: `logits = features · weights + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    #[serde(rename = "w", with = "crate::serde_array::matrix")]
    pub weights: Array2<f64>,
    #[serde(rename = "b", with = "crate::serde_array::vector")]
    pub bias: Array1<f64>,
}

impl ClassifierHead {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.ncols() != bias.len() {
            return Err(Error::DimensionMismatch {
                context: "head bias",
                expected: weights.ncols(),
                actual: bias.len(),
            });
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite head parameter".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(feature_dim: usize, class_count: usize) -> Self {
        Self {
            weights: Array2::zeros((feature_dim, class_count)),
            bias: Array1::zeros(class_count),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.weights.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// Which samples of the ideal dataset made it into the observed one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationMask(Vec<bool>);

impl ObservationMask {
    pub fn new(observed: Vec<bool>) -> Result<Self> {
        if !observed.iter().any(|&o| o) {
            return Err(Error::Empty("observation mask has no observed sample".into()));
        }
        Ok(Self(observed))
    }

    pub fn observed(&self) -> &[bool] {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&o| o).count()
    }
}
