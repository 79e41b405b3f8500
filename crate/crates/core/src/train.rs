//! Two-stage training.
//!
//! Stage 1 fits encoder and head jointly on mean cross-entropy plus a DeCov
//! penalty on the features. Stage 2 freezes the encoder, precomputes the
//! features once and retrains only the head on the IPW-weighted objective
//! with the PNS causal constraint.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ipw::Estimator;
use crate::losses::{ce_loss_grad, decov_penalty_grad, stage2_loss_grad, LossBreakdown, Stage2Options};
use crate::model::{argmax_rows, encode, head_probs, init_encoder, init_head, Encoder, Nonlinearity};
use crate::optim::{Momentum, SgdConfig};
use crate::pns::{check_epsilon, PnsVariant, DEFAULT_CLAMP_EPSILON};
use crate::types::{ClassifierHead, FeatureMatrix, LabeledDataset, Rng, RngSeed};

/// Sub-streams of `TrainConfig::seed`.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_STAGE1_SHUFFLE: u64 = 1;
pub const STREAM_STAGE2_SHUFFLE: u64 = 2;
pub const STREAM_STAGE2_INIT: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Disentanglement (DeCov) coefficient.
    pub beta: f64,
    /// Causality-constraint coefficient.
    pub lambda: f64,
    pub pns_variant: PnsVariant,
    pub clamp_epsilon: f64,
    pub ipw_estimator: Estimator,
    pub jtt_upweight: f64,
    pub afr_gamma: f64,
    pub warm_start_head: bool,
    /// Width h of the feature layer.
    pub feature_dim: usize,
    pub nonlinearity: Nonlinearity,
    /// Stage-2 gradients with a larger joint L2 norm are rescaled to this norm.
    pub max_grad_norm: Option<f64>,
    pub seed: RngSeed,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            weight_decay: 1e-4,
            momentum: 0.9,
            batch_size: 32,
            epochs: 10,
            beta: 0.5,
            lambda: 3.0,
            pns_variant: PnsVariant::Paper,
            clamp_epsilon: DEFAULT_CLAMP_EPSILON,
            ipw_estimator: Estimator::Ccr,
            jtt_upweight: 20.0,
            afr_gamma: 4.0,
            warm_start_head: true,
            feature_dim: 32,
            nonlinearity: Nonlinearity::Relu,
            max_grad_norm: None,
            seed: RngSeed::DEFAULT,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) || !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("beta and lambda must be >= 0, got {} and {}", self.beta, self.lambda));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1".into());
        }
        if self.jtt_upweight < 1.0 || self.afr_gamma < 0.0 {
            return bad("jtt_upweight must be >= 1 and afr_gamma >= 0".into());
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("max_grad_norm must be > 0, got {c}"));
            }
        }
        check_epsilon(self.clamp_epsilon).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub decov: f64,
    pub pns_penalty: f64,
    pub train_acc: f64,
}

/// One record per epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Shuffled mini-batches covering every index exactly once. A trailing batch
/// smaller than 2 is folded into the one before it.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("len > 1").extend(tail);
    }
    batches
}

fn accuracy(probs: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    let preds = argmax_rows(probs);
    preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

#[derive(Default)]
struct EpochAccumulator {
    sums: LossBreakdown,
    count: usize,
}

impl EpochAccumulator {
    fn add(&mut self, b: &LossBreakdown, size: usize) -> Result<()> {
        if !(b.total.is_finite() && b.cross_entropy.is_finite() && b.decov.is_finite() && b.pns_penalty.is_finite()) {
            return Err(Error::Divergence(format!("non-finite loss {b:?}")));
        }
        let s = size as f64;
        self.sums.total += b.total * s;
        self.sums.cross_entropy += b.cross_entropy * s;
        self.sums.decov += b.decov * s;
        self.sums.pns_penalty += b.pns_penalty * s;
        self.count += size;
        Ok(())
    }

    fn record(&self, epoch: usize, train_acc: f64) -> EpochRecord {
        let n = self.count as f64;
        EpochRecord {
            epoch,
            total: self.sums.total / n,
            ce: self.sums.cross_entropy / n,
            decov: self.sums.decov / n,
            pns_penalty: self.sums.pns_penalty / n,
            train_acc,
        }
    }
}

fn check_batchable(n: usize, cfg: &TrainConfig) -> Result<()> {
    if n < cfg.batch_size {
        return Err(Error::InvalidConfig(format!(
            "dataset has {n} samples, fewer than batch_size {}",
            cfg.batch_size
        )));
    }
    Ok(())
}

/// Stage 1: ERM with DeCov over encoder and head.
pub fn train_stage1(dataset: &LabeledDataset, config: &TrainConfig) -> Result<(Encoder, ClassifierHead, TrainHistory)> {
    config.validate()?;
    check_batchable(dataset.len(), config)?;
    let h = config.feature_dim;
    let mut init_rng = config.seed.derive(STREAM_INIT).rng();
    let mut encoder = init_encoder(dataset.input_dim(), h, config.nonlinearity, &mut init_rng);
    let mut head = init_head(h, dataset.class_count(), &mut init_rng);
    let mut shuffle_rng = config.seed.derive(STREAM_STAGE1_SHUFFLE).rng();

    let sgd = config.sgd();
    let mut m_enc_w = Momentum::new(&encoder.weights);
    let mut m_enc_b = Momentum::new(&encoder.bias);
    let mut m_head_w = Momentum::new(&head.weights);
    let mut m_head_b = Momentum::new(&head.bias);

    let x = dataset.features_raw();
    let labels = dataset.labels();
    let mut history = TrainHistory::default();
    for epoch in 0..config.epochs {
        let mut acc = EpochAccumulator::default();
        for batch in epoch_batches(dataset.len(), config.batch_size, &mut shuffle_rng) {
            let xb = x.select(Axis(0), &batch);
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let unit = vec![1.0; batch.len()];

            let pre = encoder.pre_activation(xb.view())?;
            let features = FeatureMatrix::from_trusted(encoder.activate(&pre));
            let ce = ce_loss_grad(&head, &features, &yb, &unit)?;
            let (decov, decov_grad) = decov_penalty_grad(&features)?;
            acc.add(
                &LossBreakdown {
                    total: ce.loss + config.beta * decov,
                    cross_entropy: ce.loss,
                    decov,
                    pns_penalty: 0.0,
                    beta: config.beta,
                    lambda: 0.0,
                },
                batch.len(),
            )?;

            let mut grad_features = ce.grad_features;
            if config.beta != 0.0 {
                grad_features.scaled_add(config.beta, &decov_grad);
            }
            let nl = encoder.nonlinearity;
            let grad_pre = grad_features * pre.mapv(|v| nl.derivative(v));
            let grad_enc_w = xb.t().dot(&grad_pre);
            let grad_enc_b = grad_pre.sum_axis(Axis(0));

            m_enc_w.step(&sgd, &mut encoder.weights, &grad_enc_w);
            m_enc_b.step(&sgd, &mut encoder.bias, &grad_enc_b);
            m_head_w.step(&sgd, &mut head.weights, &ce.grad_weights);
            m_head_b.step(&sgd, &mut head.bias, &ce.grad_bias);
        }
        if !(encoder.is_finite() && head.is_finite()) {
            return Err(Error::Divergence(format!("stage-1 parameters non-finite after epoch {epoch}")));
        }
        let probs = head_probs(&head, &encode(&encoder, x)?)?;
        history.epochs.push(acc.record(epoch, accuracy(probs.view(), labels)));
    }
    Ok((encoder, head, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub correct: usize,
    pub incorrect: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Eval {
    pub preds: Vec<usize>,
    pub probs: Array2<f64>,
    /// Indexed by class.
    pub counts: Vec<ClassCounts>,
}

/// Predictions of the stage-1 model on its own training data.
pub fn evaluate_stage1(encoder: &Encoder, head: &ClassifierHead, dataset: &LabeledDataset) -> Result<Stage1Eval> {
    let probs = head_probs(head, &encode(encoder, dataset.features_raw())?)?;
    let preds = argmax_rows(probs.view());
    let mut counts = vec![ClassCounts::default(); dataset.class_count()];
    for (&p, &y) in preds.iter().zip(dataset.labels()) {
        if p == y {
            counts[y].correct += 1;
        } else {
            counts[y].incorrect += 1;
        }
    }
    Ok(Stage1Eval { preds, probs, counts })
}

/// Stage 2: retrain the head over frozen features with the weighted
/// cross-entropy plus PNS penalty.
fn clip_joint_norm(w: &mut Array2<f64>, b: &mut Array1<f64>, max: f64) {
    let norm = (w.iter().chain(b.iter()).map(|x| x * x).sum::<f64>()).sqrt();
    if norm > max {
        let scale = max / norm;
        w.mapv_inplace(|x| x * scale);
        b.mapv_inplace(|x| x * scale);
    }
}

pub fn train_stage2(
    encoder: &Encoder,
    head_init: &ClassifierHead,
    dataset: &LabeledDataset,
    weights: &[f64],
    config: &TrainConfig,
) -> Result<(ClassifierHead, TrainHistory)> {
    config.validate()?;
    check_batchable(dataset.len(), config)?;
    crate::losses::check_weights(weights, dataset.len())?;
    let features = encode(encoder, dataset.features_raw())?;
    if head_init.feature_dim() != features.feature_dim() || head_init.class_count() != dataset.class_count() {
        return Err(Error::DimensionMismatch {
            context: "stage-2 head shape",
            expected: features.feature_dim(),
            actual: head_init.feature_dim(),
        });
    }
    let mut head = if config.warm_start_head {
        head_init.clone()
    } else {
        init_head(
            features.feature_dim(),
            dataset.class_count(),
            &mut config.seed.derive(STREAM_STAGE2_INIT).rng(),
        )
    };
    let opts = Stage2Options {
        lambda: config.lambda,
        variant: config.pns_variant,
        clamp_epsilon: config.clamp_epsilon,
    };
    let sgd = config.sgd();
    let mut m_w = Momentum::new(&head.weights);
    let mut m_b = Momentum::new(&head.bias);
    let mut shuffle_rng = config.seed.derive(STREAM_STAGE2_SHUFFLE).rng();
    let labels = dataset.labels();

    let mut history = TrainHistory::default();
    for epoch in 0..config.epochs {
        let mut acc = EpochAccumulator::default();
        for batch in epoch_batches(dataset.len(), config.batch_size, &mut shuffle_rng) {
            let fb = features.select_rows(&batch);
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let wb: Vec<f64> = batch.iter().map(|&i| weights[i]).collect();
            let mut g = stage2_loss_grad(&head, &fb, &yb, &wb, opts)?;
            acc.add(&g.breakdown, batch.len())?;
            if let Some(max) = config.max_grad_norm {
                clip_joint_norm(&mut g.grad_weights, &mut g.grad_bias, max);
            }
            m_w.step(&sgd, &mut head.weights, &g.grad_weights);
            m_b.step(&sgd, &mut head.bias, &g.grad_bias);
        }
        if !head.is_finite() {
            return Err(Error::Divergence(format!("stage-2 head non-finite after epoch {epoch}")));
        }
        let probs = head_probs(&head, &features)?;
        history.epochs.push(acc.record(epoch, accuracy(probs.view(), labels)));
    }
    Ok((head, history))
}
