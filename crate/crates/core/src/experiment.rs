//! End-to-end experiment driver: data preparation, both training stages,
//! weight estimation, evaluation, and the multi-run comparisons (method table,
//! ablation grid, lambda sweep).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{generate_ideal, subsample_observe, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::{group_metrics, occlusion_attribution, AttributionReport, BlockSpec, MetricsReport};
use crate::fvec::{read_fvec, write_fvec};
use crate::ipw::{
    estimate_propensity_ccr, pseudo_group, weights_afr, weights_from_propensity, weights_jtt, weights_oracle,
    Estimator, PropensityTable, WeightVector,
};
use crate::model::{encode, head_probs, argmax_rows, Encoder, ModelParams};
use crate::train::{evaluate_stage1, train_stage1, train_stage2, ClassCounts, Stage1Eval, TrainConfig, TrainHistory};
use crate::types::{ClassifierHead, FeatureMatrix, LabeledDataset, RngSeed};

const STREAM_IDEAL: u64 = 10;
const STREAM_OBSERVE: u64 = 11;
const STREAM_TEST: u64 = 12;
const STREAM_VALIDATION: u64 = 13;
const STREAM_STAGE1: u64 = 20;
const STREAM_STAGE2: u64 = 21;
const STREAM_ATTRIBUTION: u64 = 30;

/// Lambda values of the default causality-coefficient sweep.
pub const DEFAULT_LAMBDA_SWEEP: [f64; 6] = [0.001, 0.5, 1.0, 2.0, 3.0, 5.0];

/// Where the training and evaluation data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Fvec { train: PathBuf, test: PathBuf },
}

/// Train/test data for one seed. `observation_probs` is known only for
/// synthetic data and enables the oracle estimator.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub ideal: Option<LabeledDataset>,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub validation: Option<LabeledDataset>,
    pub observation_probs: Option<Vec<Vec<f64>>>,
    /// Raw-input blocks used for occlusion attribution.
    pub blocks: BlockSpec,
}

/// Observed training split, a balanced test split and a balanced validation
/// split, all drawn from `seed`.
pub fn prepare_synthetic(config: &SyntheticConfig, seed: RngSeed) -> Result<PreparedData> {
    let ideal = generate_ideal(config, seed.derive(STREAM_IDEAL))?;
    let (train, _) = subsample_observe(&ideal, config, seed.derive(STREAM_OBSERVE))?;
    let test = generate_ideal(config, seed.derive(STREAM_TEST))?;
    let validation = generate_ideal(config, seed.derive(STREAM_VALIDATION))?;
    Ok(PreparedData {
        ideal: Some(ideal),
        train,
        test,
        validation: Some(validation),
        observation_probs: Some(config.observation_probs.clone()),
        blocks: BlockSpec::causal_spurious(config.causal_dim, config.spurious_dim),
    })
}

pub fn load_fvec_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let data = read_fvec(path)?;
    let labels = data.labels_usize();
    let groups = data.groups_usize();
    LabeledDataset::from_features(data.features, labels, groups, data.class_count as usize)
}

/// Writes raw inputs, labels and (if present) group ids as FVEC1.
pub fn save_fvec_dataset(path: impl AsRef<Path>, data: &LabeledDataset) -> Result<()> {
    let labels: Vec<u32> = data.labels().iter().map(|&y| y as u32).collect();
    let groups: Option<Vec<i32>> = data.group_ids().map(|g| g.iter().map(|&v| v as i32).collect());
    let features = FeatureMatrix::new(data.features_raw().to_owned())?;
    write_fvec(path, &features, &labels, groups.as_deref(), data.class_count() as u32)
}

impl DataSource {
    /// `blocks` overrides the attribution blocks; without it FVEC inputs are
    /// treated as one block spanning every column.
    pub fn prepare(&self, seed: RngSeed, blocks: Option<&BlockSpec>) -> Result<PreparedData> {
        let mut data = match self {
            DataSource::Synthetic(cfg) => prepare_synthetic(cfg, seed)?,
            DataSource::Fvec { train, test } => {
                let test = load_fvec_dataset(test)?;
                PreparedData {
                    ideal: None,
                    train: load_fvec_dataset(train)?,
                    blocks: BlockSpec::for_dataset(&test),
                    test,
                    validation: None,
                    observation_probs: None,
                }
            }
        };
        if let Some(b) = blocks {
            data.blocks = b.clone();
        }
        data.blocks.validate(data.test.input_dim())?;
        Ok(data)
    }
}

/// Sample weights for stage 2 plus the pseudo-group of each sample, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct StageWeights {
    pub weights: WeightVector,
    pub groups: Option<Vec<usize>>,
    pub propensity: Option<PropensityTable>,
}

pub fn compute_weights(
    estimator: Estimator,
    stage1: &Stage1Eval,
    train: &LabeledDataset,
    config: &TrainConfig,
    observation_probs: Option<&[Vec<f64>]>,
) -> Result<StageWeights> {
    let labels = train.labels();
    let pseudo: Vec<usize> = labels.iter().zip(&stage1.preds).map(|(&y, &p)| pseudo_group(y, p)).collect();
    Ok(match estimator {
        Estimator::Ccr => {
            let table = estimate_propensity_ccr(&stage1.preds, labels)?;
            StageWeights {
                weights: weights_from_propensity(&table)?,
                groups: Some(table.pseudo_group_of.clone()),
                propensity: Some(table),
            }
        }
        Estimator::Jtt => StageWeights {
            weights: weights_jtt(&stage1.preds, labels, config.jtt_upweight)?,
            groups: Some(pseudo),
            propensity: None,
        },
        Estimator::Afr => StageWeights {
            weights: weights_afr(stage1.probs.view(), labels, config.afr_gamma)?,
            groups: Some(pseudo),
            propensity: None,
        },
        Estimator::Oracle => {
            let probs = observation_probs
                .ok_or_else(|| Error::InvalidConfig("oracle weights need known observation probabilities".into()))?;
            let groups = train
                .group_ids()
                .ok_or_else(|| Error::InvalidConfig("oracle weights need true group ids".into()))?;
            let k = train
                .spurious_value_count()
                .unwrap_or_else(|| probs.first().map_or(1, Vec::len));
            StageWeights {
                weights: weights_oracle(groups, probs, k)?,
                groups: Some(groups.to_vec()),
                propensity: None,
            }
        }
        Estimator::None => StageWeights {
            weights: WeightVector::uniform(train.len()),
            groups: None,
            propensity: None,
        },
    })
}

/// Everything one pipeline run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub encoder: Encoder,
    pub stage1_head: ClassifierHead,
    pub head: ClassifierHead,
    pub stage1_history: TrainHistory,
    pub stage2_history: TrainHistory,
    pub stage1_counts: Vec<ClassCounts>,
    pub weights: StageWeights,
    pub metrics: Option<MetricsReport>,
    pub validation_metrics: Option<MetricsReport>,
    pub attribution: Option<AttributionReport>,
}

impl RunOutcome {
    pub fn params(&self) -> ModelParams {
        ModelParams {
            encoder: self.encoder.clone(),
            head: self.head.clone(),
        }
    }

    pub fn stage1_params(&self) -> ModelParams {
        ModelParams {
            encoder: self.encoder.clone(),
            head: self.stage1_head.clone(),
        }
    }
}

pub fn predict(encoder: &Encoder, head: &ClassifierHead, data: &LabeledDataset) -> Result<Vec<usize>> {
    let probs = head_probs(head, &encode(encoder, data.features_raw())?)?;
    Ok(argmax_rows(probs.view()))
}

pub fn evaluate(encoder: &Encoder, head: &ClassifierHead, data: &LabeledDataset) -> Result<MetricsReport> {
    group_metrics(&predict(encoder, head, data)?, data.labels(), data.group_ids())
}

/// Stage 1, weights, stage 2, then metrics and attribution on the test split.
/// Seeds inside the configs are replaced by streams derived from `seed`.
pub fn run_pipeline(data: &PreparedData, stage1: &TrainConfig, stage2: &TrainConfig, seed: RngSeed) -> Result<RunOutcome> {
    let stage1_cfg = TrainConfig {
        seed: seed.derive(STREAM_STAGE1),
        ..stage1.clone()
    };
    let stage2_cfg = TrainConfig {
        seed: seed.derive(STREAM_STAGE2),
        ..stage2.clone()
    };
    let (encoder, stage1_head, stage1_history) = train_stage1(&data.train, &stage1_cfg)?;
    let eval1 = evaluate_stage1(&encoder, &stage1_head, &data.train)?;
    let weights = compute_weights(
        stage2_cfg.ipw_estimator,
        &eval1,
        &data.train,
        &stage2_cfg,
        data.observation_probs.as_deref(),
    )?;
    let (head, stage2_history) = train_stage2(&encoder, &stage1_head, &data.train, &weights.weights.weights, &stage2_cfg)?;

    let metrics = match data.test.group_ids() {
        Some(_) => Some(evaluate(&encoder, &head, &data.test)?),
        None => None,
    };
    let validation_metrics = match &data.validation {
        Some(v) if v.group_ids().is_some() => Some(evaluate(&encoder, &head, v)?),
        _ => None,
    };
    let attribution = Some(occlusion_attribution(
        &encoder,
        &head,
        &data.test,
        &data.blocks,
        seed.derive(STREAM_ATTRIBUTION),
    )?);
    Ok(RunOutcome {
        encoder,
        stage1_head,
        head,
        stage1_history,
        stage2_history,
        stage1_counts: eval1.counts,
        weights,
        metrics,
        validation_metrics,
        attribution,
    })
}

/// A named configuration of the three components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub name: String,
    pub beta: f64,
    pub lambda: f64,
    pub estimator: Estimator,
}

impl Method {
    pub fn new(name: &str, beta: f64, lambda: f64, estimator: Estimator) -> Self {
        Self {
            name: name.to_string(),
            beta,
            lambda,
            estimator,
        }
    }

    pub fn configs(&self, stage1: &TrainConfig, stage2: &TrainConfig) -> (TrainConfig, TrainConfig) {
        (
            TrainConfig {
                beta: self.beta,
                ..stage1.clone()
            },
            TrainConfig {
                lambda: self.lambda,
                ipw_estimator: self.estimator,
                ..stage2.clone()
            },
        )
    }
}

/// ERM, JTT weights, AFR weights and the full method.
pub fn method_table(beta: f64, lambda: f64) -> Vec<Method> {
    vec![
        Method::new("ERM", 0.0, 0.0, Estimator::None),
        Method::new("JTT", 0.0, 0.0, Estimator::Jtt),
        Method::new("AFR", 0.0, 0.0, Estimator::Afr),
        Method::new("CCR", beta, lambda, Estimator::Ccr),
    ]
}

/// Every on/off combination of disentanglement, causal feature selection and
/// IPW, plus the full method with the JTT and AFR weight estimators.
pub fn ablation_grid(beta: f64, lambda: f64) -> Vec<Method> {
    let mut rows = Vec::with_capacity(10);
    for ipw in [false, true] {
        for cfs in [false, true] {
            for disentangle in [false, true] {
                let mut parts = Vec::new();
                if disentangle {
                    parts.push("disentangle");
                }
                if cfs {
                    parts.push("CFS");
                }
                if ipw {
                    parts.push("IPW");
                }
                let name = if parts.is_empty() { "ERM".to_string() } else { parts.join(" + ") };
                rows.push(Method::new(
                    &name,
                    if disentangle { beta } else { 0.0 },
                    if cfs { lambda } else { 0.0 },
                    if ipw { Estimator::Ccr } else { Estimator::None },
                ));
            }
        }
    }
    rows.push(Method::new("disentangle + CFS + IPW (AFR)", beta, lambda, Estimator::Afr));
    rows.push(Method::new("disentangle + CFS + IPW (JTT)", beta, lambda, Estimator::Jtt));
    rows
}

/// Median and range over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Summary {
            median,
            min: v[0],
            max: v[n - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub seed: RngSeed,
    pub mean_accuracy: f64,
    pub worst_group_accuracy: f64,
    pub validation_worst_group_accuracy: Option<f64>,
    pub spurious_attribution: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    pub runs: Vec<CellResult>,
    pub mean_accuracy: Summary,
    pub worst_group_accuracy: Summary,
    pub spurious_attribution: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<MethodRow>,
}

impl Comparison {
    pub fn row(&self, name: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method.name == name)
    }

    pub fn render_table(&self) -> String {
        use std::fmt::Write as _;
        let width = self.rows.iter().map(|r| r.method.name.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        writeln!(
            out,
            "{:<width$}  {:>6}  {:>6}  {:>9}  {:>17}  {:>17}",
            "method", "beta", "lambda", "weights", "mean acc (range)", "WGA (range)"
        )
        .unwrap();
        for r in &self.rows {
            let m = &r.method;
            writeln!(
                out,
                "{:<width$}  {:>6}  {:>6}  {:>9}  {:.4} ({:.2}-{:.2})  {:.4} ({:.2}-{:.2})",
                m.name,
                m.beta,
                m.lambda,
                m.estimator.name(),
                r.mean_accuracy.median,
                r.mean_accuracy.min,
                r.mean_accuracy.max,
                r.worst_group_accuracy.median,
                r.worst_group_accuracy.min,
                r.worst_group_accuracy.max,
            )
            .unwrap();
        }
        out
    }
}

fn run_cell(
    source: &DataSource,
    blocks: Option<&BlockSpec>,
    method: &Method,
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    seed: RngSeed,
) -> Result<CellResult> {
    let data = source.prepare(seed, blocks)?;
    let (s1, s2) = method.configs(stage1, stage2);
    let out = run_pipeline(&data, &s1, &s2, seed)?;
    let metrics = out
        .metrics
        .ok_or_else(|| Error::InvalidConfig("comparison needs a test set with group ids".into()))?;
    Ok(CellResult {
        seed,
        mean_accuracy: metrics.mean_accuracy,
        worst_group_accuracy: metrics.worst_group_accuracy,
        validation_worst_group_accuracy: out.validation_metrics.as_ref().map(|m| m.worst_group_accuracy),
        spurious_attribution: out
            .attribution
            .as_ref()
            .and_then(|a| a.block("spurious"))
            .map(|b| b.mean),
    })
}

/// Runs every (method, seed) cell, in parallel on up to `threads` workers.
/// Results do not depend on the thread count.
pub fn compare(
    source: &DataSource,
    blocks: Option<&BlockSpec>,
    methods: &[Method],
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    seeds: &[RngSeed],
    threads: usize,
) -> Result<Comparison> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("seed list is empty".into()));
    }
    let cells: Vec<(usize, RngSeed)> = (0..methods.len())
        .flat_map(|m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let results: Vec<Result<CellResult>> = pool.install(|| {
        use rayon::prelude::*;
        cells
            .par_iter()
            .map(|&(m, s)| run_cell(source, blocks, &methods[m], stage1, stage2, s))
            .collect()
    });
    let mut results = results.into_iter();
    let mut rows = Vec::with_capacity(methods.len());
    for method in methods {
        let runs = results.by_ref().take(seeds.len()).collect::<Result<Vec<_>>>()?;
        let pick = |f: fn(&CellResult) -> f64| Summary::of(&runs.iter().map(f).collect::<Vec<_>>());
        let attributions: Option<Vec<f64>> = runs.iter().map(|r| r.spurious_attribution).collect();
        rows.push(MethodRow {
            method: method.clone(),
            mean_accuracy: pick(|r| r.mean_accuracy),
            worst_group_accuracy: pick(|r| r.worst_group_accuracy),
            spurious_attribution: attributions.map(|a| Summary::of(&a)),
            runs,
        });
    }
    Ok(Comparison { rows })
}

/// One point of a lambda sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub metrics: MetricsReport,
    pub validation_metrics: Option<MetricsReport>,
    pub final_pns_penalty: f64,
}

/// Retrains stage 2 for each lambda on top of one shared stage-1 model.
pub fn lambda_sweep(
    data: &PreparedData,
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    lambdas: &[f64],
    seed: RngSeed,
) -> Result<Vec<SweepPoint>> {
    let stage1_cfg = TrainConfig {
        seed: seed.derive(STREAM_STAGE1),
        ..stage1.clone()
    };
    let (encoder, stage1_head, _) = train_stage1(&data.train, &stage1_cfg)?;
    let eval1 = evaluate_stage1(&encoder, &stage1_head, &data.train)?;
    lambdas
        .iter()
        .map(|&lambda| {
            let cfg = TrainConfig {
                lambda,
                seed: seed.derive(STREAM_STAGE2),
                ..stage2.clone()
            };
            let weights = compute_weights(cfg.ipw_estimator, &eval1, &data.train, &cfg, data.observation_probs.as_deref())?;
            let (head, history) = train_stage2(&encoder, &stage1_head, &data.train, &weights.weights.weights, &cfg)?;
            let validation_metrics = match &data.validation {
                Some(v) if v.group_ids().is_some() => Some(evaluate(&encoder, &head, v)?),
                _ => None,
            };
            Ok(SweepPoint {
                lambda,
                metrics: evaluate(&encoder, &head, &data.test)?,
                validation_metrics,
                final_pns_penalty: history.last().map_or(0.0, |r| r.pns_penalty),
            })
        })
        .collect()
}

/// Lambda with the best validation worst-group accuracy; ties go to the
/// smaller lambda. Falls back to test metrics without a validation split.
pub fn select_lambda(points: &[SweepPoint]) -> Option<f64> {
    best_lambda(points.iter().map(|p| {
        let m = p.validation_metrics.as_ref().unwrap_or(&p.metrics);
        (p.lambda, m.worst_group_accuracy)
    }))
}

/// Picks among rows that differ only in lambda, by the median over seeds of
/// validation worst-group accuracy. Ties go to the smaller lambda.
pub fn select_lambda_over_seeds(rows: &[MethodRow]) -> Option<f64> {
    best_lambda(rows.iter().map(|r| {
        let scores: Vec<f64> = r
            .runs
            .iter()
            .map(|c| c.validation_worst_group_accuracy.unwrap_or(c.worst_group_accuracy))
            .collect();
        (r.method.lambda, Summary::of(&scores).median)
    }))
}

fn best_lambda(scored: impl Iterator<Item = (f64, f64)>) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for (lambda, score) in scored {
        let better = match best {
            None => true,
            Some((bl, bs)) => score > bs || (score == bs && lambda < bl),
        };
        if better {
            best = Some((lambda, score));
        }
    }
    best.map(|(l, _)| l)
}

/// Full experiment description, read from JSON by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub data: DataSource,
    #[serde(default = "default_stage1")]
    pub stage1: TrainConfig,
    #[serde(default = "default_stage2")]
    pub stage2: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<RngSeed>,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    /// Attribution blocks as `name=start..end,...`.
    #[serde(default)]
    pub blocks: Option<String>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_stage1() -> TrainConfig {
    default_stage1_config()
}

fn default_stage2() -> TrainConfig {
    default_stage2_config()
}

fn default_seeds() -> Vec<RngSeed> {
    vec![RngSeed::DEFAULT]
}

fn default_lambdas() -> Vec<f64> {
    DEFAULT_LAMBDA_SWEEP.to_vec()
}

/// Stage-1 settings tuned for the synthetic benchmark.
pub fn default_stage1_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.03,
        weight_decay: 1e-4,
        batch_size: 256,
        epochs: 20,
        feature_dim: 8,
        beta: 0.5,
        lambda: 0.0,
        ipw_estimator: Estimator::None,
        ..TrainConfig::default()
    }
}

/// Stage-2 settings tuned for the synthetic benchmark.
pub fn default_stage2_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.003,
        weight_decay: 1e-4,
        batch_size: 32,
        epochs: 40,
        feature_dim: 8,
        lambda: 3.0,
        ipw_estimator: Estimator::Ccr,
        max_grad_norm: Some(1.0),
        ..TrainConfig::default()
    }
}

impl ExperimentSpec {
    pub fn bench_v1() -> Self {
        Self {
            data: DataSource::Synthetic(SyntheticConfig::bench_v1()),
            stage1: default_stage1_config(),
            stage2: default_stage2_config(),
            seeds: default_seeds(),
            lambdas: default_lambdas(),
            blocks: None,
            out_dir: None,
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn block_spec(&self) -> Result<Option<BlockSpec>> {
        self.blocks.as_deref().map(BlockSpec::parse).transpose()
    }

    pub fn prepare(&self, seed: RngSeed) -> Result<PreparedData> {
        self.data.prepare(seed, self.block_spec()?.as_ref())
    }

    pub fn compare(&self, methods: &[Method], threads: usize) -> Result<Comparison> {
        compare(&self.data, self.block_spec()?.as_ref(), methods, &self.stage1, &self.stage2, &self.seeds, threads)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must be non-empty".into()));
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.block_spec()?;
        match &self.data {
            DataSource::Synthetic(cfg) => cfg.validate(),
            DataSource::Fvec { train, test } => {
                for p in [train, test] {
                    if !p.exists() {
                        return Err(Error::InvalidConfig(format!("{} does not exist", p.display())));
                    }
                }
                Ok(())
            }
        }
    }
}
