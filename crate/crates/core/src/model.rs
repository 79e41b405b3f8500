//! Encoder and linear-softmax head.
//!
//! The encoder is a single affine layer followed by an optional rectifier.
//! With the rectifier every feature is non-negative, so zeroing a feature is
//! the same as the feature being absent.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayViewMut1, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ClassifierHead, FeatureMatrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    Relu,
    Identity,
}

impl Nonlinearity {
    fn apply(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Relu => v.max(0.0),
            Nonlinearity::Identity => v,
        }
    }

    /// Derivative at pre-activation `v` (0 at the rectifier kink).
    pub(crate) fn derivative(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Identity => 1.0,
        }
    }
}

/// Frozen feature extractor mapping raw inputs (width d) to features (width h).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    #[serde(rename = "w", with = "crate::serde_array::matrix")]
    pub weights: Array2<f64>,
    #[serde(rename = "b", with = "crate::serde_array::vector")]
    pub bias: Array1<f64>,
    pub nonlinearity: Nonlinearity,
}

impl Encoder {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, nonlinearity: Nonlinearity) -> Result<Self> {
        if weights.ncols() != bias.len() {
            return Err(Error::DimensionMismatch {
                context: "encoder bias",
                expected: weights.ncols(),
                actual: bias.len(),
            });
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite encoder parameter".into()));
        }
        Ok(Self {
            weights,
            bias,
            nonlinearity,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }

    /// Pre-activations `inputs · W + b`.
    pub(crate) fn pre_activation(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "encoder input width",
                expected: self.input_dim(),
                actual: inputs.ncols(),
            });
        }
        Ok(inputs.dot(&self.weights) + &self.bias)
    }

    pub(crate) fn activate(&self, pre: &Array2<f64>) -> Array2<f64> {
        let nl = self.nonlinearity;
        pre.mapv(|v| nl.apply(v))
    }
}

/// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
fn uniform_fan_in(rows: usize, cols: usize, rng: &mut Rng) -> (Array2<f64>, Array1<f64>) {
    let bound = 1.0 / (rows as f64).sqrt();
    let w = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound));
    let b = Array1::from_shape_simple_fn(cols, || rng.random_range(-bound..=bound));
    (w, b)
}

pub fn init_encoder(input_dim: usize, feature_dim: usize, nonlinearity: Nonlinearity, rng: &mut Rng) -> Encoder {
    let (weights, bias) = uniform_fan_in(input_dim, feature_dim, rng);
    Encoder {
        weights,
        bias,
        nonlinearity,
    }
}

pub fn init_head(feature_dim: usize, class_count: usize, rng: &mut Rng) -> ClassifierHead {
    let (weights, bias) = uniform_fan_in(feature_dim, class_count, rng);
    ClassifierHead { weights, bias }
}

/// Row `i` is `nonlinearity(inputs_i · W + b)`.
pub fn encode(encoder: &Encoder, inputs: ArrayView2<'_, f64>) -> Result<FeatureMatrix> {
    let pre = encoder.pre_activation(inputs)?;
    let out = encoder.activate(&pre);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("encoder produced a non-finite feature".into()));
    }
    Ok(FeatureMatrix::from_trusted(out))
}

/// In-place max-subtracted softmax of one row of logits.
pub(crate) fn softmax_inplace(mut row: ArrayViewMut1<'_, f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    row.mapv_inplace(|z| (z - max).exp());
    let sum = row.sum();
    row /= sum;
}

pub(crate) fn check_head(head: &ClassifierHead, features: &FeatureMatrix) -> Result<()> {
    if features.feature_dim() != head.feature_dim() {
        return Err(Error::DimensionMismatch {
            context: "head input width",
            expected: head.feature_dim(),
            actual: features.feature_dim(),
        });
    }
    Ok(())
}

pub fn head_logits(head: &ClassifierHead, features: &FeatureMatrix) -> Result<Array2<f64>> {
    check_head(head, features)?;
    Ok(features.values().dot(&head.weights) + &head.bias)
}

/// Softmax class probabilities, one row per sample.
pub fn head_probs(head: &ClassifierHead, features: &FeatureMatrix) -> Result<Array2<f64>> {
    let mut logits = head_logits(head, features)?;
    for row in logits.rows_mut() {
        softmax_inplace(row);
    }
    Ok(logits)
}

/// Probabilities with each feature occluded in turn: entry `(i, j, c)` is the
/// class-`c` probability of sample `i` after zeroing feature `j`.
///
/// Uses `logits_cf = logits - f_ij * W_j` instead of re-running the head on
/// `h` masked copies.
pub fn counterfactual_probs(head: &ClassifierHead, features: &FeatureMatrix) -> Result<Array3<f64>> {
    let logits = head_logits(head, features)?;
    let (n, h) = (features.n_samples(), features.feature_dim());
    let c = head.class_count();
    let f = features.values();
    let mut out = Array3::<f64>::zeros((n, h, c));
    for i in 0..n {
        let z = logits.row(i);
        for j in 0..h {
            let mut slot = out.slice_mut(s![i, j, ..]);
            let fij = f[[i, j]];
            if fij == 0.0 {
                slot.assign(&z);
            } else {
                slot.assign(&(&z - &(&head.weights.row(j) * fij)));
            }
            softmax_inplace(slot);
        }
    }
    Ok(out)
}

/// Argmax per row; ties resolve to the lowest class id.
pub fn argmax_rows(probs: ArrayView2<'_, f64>) -> Vec<usize> {
    probs.axis_iter(Axis(0)).map(argmax).collect()
}

pub(crate) fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = c;
        }
    }
    best
}

/// Encoder plus head, serialized as
/// `{"encoder": {"w", "b", "nonlinearity"}, "head": {"w", "b"}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: Encoder,
    pub head: ClassifierHead,
}

impl ModelParams {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let params: Self = serde_json::from_str(text)?;
        let encoder = Encoder::new(params.encoder.weights, params.encoder.bias, params.encoder.nonlinearity)?;
        let head = ClassifierHead::new(params.head.weights, params.head.bias)?;
        if head.feature_dim() != encoder.feature_dim() {
            return Err(Error::DimensionMismatch {
                context: "head input width vs encoder output width",
                expected: encoder.feature_dim(),
                actual: head.feature_dim(),
            });
        }
        Ok(Self { encoder, head })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn predict_probs(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        head_probs(&self.head, &encode(&self.encoder, inputs)?)
    }
}
