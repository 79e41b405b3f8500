mod artifacts;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ccr_core::datagen::{generate_ideal, subsample_observe, SyntheticConfig};
use ccr_core::eval::{occlusion_attribution, BlockSpec};
use ccr_core::experiment::{
    ablation_grid, compute_weights, evaluate, lambda_sweep, load_fvec_dataset, method_table, run_pipeline,
    save_fvec_dataset, select_lambda, ExperimentSpec,
};
use ccr_core::ipw::{read_weights_csv, write_weights_csv, Estimator};
use ccr_core::model::ModelParams;
use ccr_core::pns::PnsVariant;
use ccr_core::train::{evaluate_stage1, train_stage1, train_stage2, TrainConfig};
use ccr_core::types::RngSeed;
use ccr_core::experiment::{default_stage1_config, default_stage2_config};

use artifacts::{write_json, Manifest};

/// Two-stage robust classifier training on frozen features.
#[derive(Parser)]
#[command(name = "ccr-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate ideal, observed and test splits from a synthetic config.
    Gen(GenArgs),
    /// Stage 1: train encoder and head with cross-entropy plus DeCov.
    Train1(Train1Args),
    /// Estimate stage-2 sample weights from a stage-1 model.
    Weights(WeightsArgs),
    /// Stage 2: retrain the head on frozen features.
    Train2(Train2Args),
    /// Mean and worst-group accuracy of a model.
    Eval(EvalArgs),
    /// Occlusion attribution over raw-input blocks.
    Attribute(AttributeArgs),
    /// Full pipeline for one seed.
    Run(ExperimentArgs),
    /// Stage-2 lambda sweep over one stage-1 model.
    Sweep(ExperimentArgs),
    /// Method comparison (or ablation grid) over the seed list.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Synthetic data config (JSON); bench-v1 when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = RngSeed::DEFAULT.0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train1Args {
    /// Training data (FVEC1).
    #[arg(long)]
    data: PathBuf,
    /// Training config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WeightsArgs {
    /// Stage-1 model (JSON).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "ccr")]
    estimator: Estimator,
    /// Training config supplying the JTT and AFR parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Synthetic config supplying observation probabilities for the oracle.
    #[arg(long)]
    synthetic_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train2Args {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Weights CSV from the weights command; uniform when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    variant: Option<PnsVariant>,
    #[arg(long)]
    warm_start: Option<bool>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Evaluation data with group ids (FVEC1).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttributeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Blocks as `name=start..end,...`; defaults to the synthetic config's
    /// causal and spurious blocks.
    #[arg(long)]
    blocks: Option<String>,
    #[arg(long)]
    synthetic_config: Option<PathBuf>,
    #[arg(long, default_value_t = RngSeed::DEFAULT.0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment spec (JSON); the bench-v1 experiment when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Run the ten-row component ablation instead of the method table.
    #[arg(long)]
    ablation: bool,
}

#[derive(Args)]
struct Overrides {
    /// Replaces the spec's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    estimator: Option<Estimator>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    variant: Option<PnsVariant>,
    #[arg(long)]
    warm_start: Option<bool>,
}

impl Overrides {
    fn apply(&self, spec: &mut ExperimentSpec) {
        if let Some(s) = self.seed {
            spec.seeds = vec![RngSeed(s)];
        }
        if let Some(e) = self.estimator {
            spec.stage2.ipw_estimator = e;
        }
        if let Some(l) = self.lambda {
            spec.stage2.lambda = l;
        }
        if let Some(b) = self.beta {
            spec.stage1.beta = b;
        }
        if let Some(v) = self.variant {
            spec.stage2.pns_variant = v;
        }
        if let Some(w) = self.warm_start {
            spec.stage2.warm_start_head = w;
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let numerical = err
                .chain()
                .any(|c| c.downcast_ref::<ccr_core::Error>().is_some_and(ccr_core::Error::is_numerical));
            ExitCode::from(if numerical { 3 } else { 2 })
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train1(a) => cmd_train1(a),
        Command::Weights(a) => cmd_weights(a),
        Command::Train2(a) => cmd_train2(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Attribute(a) => cmd_attribute(a),
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Compare(a) => cmd_compare(a),
    }
}

fn synthetic_config(path: Option<&Path>) -> Result<SyntheticConfig> {
    match path {
        Some(p) => SyntheticConfig::from_json_file(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(SyntheticConfig::bench_v1()),
    }
}

fn train_config(path: Option<&Path>, default: TrainConfig) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_json_file(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(default),
    }
}

fn experiment_spec(args: &ExperimentArgs) -> Result<ExperimentSpec> {
    let mut spec = match &args.config {
        Some(p) => ExperimentSpec::from_json_file(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentSpec::bench_v1(),
    };
    args.overrides.apply(&mut spec);
    spec.validate()?;
    Ok(spec)
}

fn out_dir(args: &ExperimentArgs, spec: &ExperimentSpec) -> Result<PathBuf> {
    match args.out.clone().or_else(|| spec.out_dir.clone()) {
        Some(p) => Ok(p),
        None => bail!("no output directory: pass --out or set out_dir in the spec"),
    }
}

fn threads() -> usize {
    std::env::var("CCR_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from))
}

#[derive(Serialize)]
struct GroupSummary {
    ideal_n: usize,
    observed_n: usize,
    ideal_counts: Vec<usize>,
    observed_counts: Vec<usize>,
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let cfg = synthetic_config(a.config.as_deref())?;
    let seed = RngSeed(a.seed);
    let ideal = generate_ideal(&cfg, seed.derive(0))?;
    let (observed, _) = subsample_observe(&ideal, &cfg, seed.derive(1))?;
    let test = generate_ideal(&cfg, seed.derive(2))?;

    let mut m = Manifest::new("gen", &a.out)?;
    m.seed(a.seed);
    m.config(a.config.as_deref())?;
    save_fvec_dataset(m.artifact("ideal.fvec"), &ideal)?;
    save_fvec_dataset(m.artifact("observed.fvec"), &observed)?;
    save_fvec_dataset(m.artifact("test.fvec"), &test)?;
    let counts = |d: &ccr_core::LabeledDataset| d.group_counts().unwrap_or_default();
    write_json(
        &m.artifact("groups.json"),
        &GroupSummary {
            ideal_n: ideal.len(),
            observed_n: observed.len(),
            ideal_counts: counts(&ideal),
            observed_counts: counts(&observed),
        },
    )?;
    m.finish()
}

fn cmd_train1(a: Train1Args) -> Result<()> {
    let data = load_fvec_dataset(&a.data)?;
    let mut cfg = train_config(a.config.as_deref(), default_stage1_config())?;
    if let Some(s) = a.seed {
        cfg.seed = RngSeed(s);
    }
    if let Some(b) = a.beta {
        cfg.beta = b;
    }
    cfg.validate()?;
    let (encoder, head, history) = train_stage1(&data, &cfg)?;

    let mut m = Manifest::new("train1", &a.out)?;
    m.seed(cfg.seed.0);
    m.config(a.config.as_deref())?;
    ModelParams { encoder, head }.save(m.artifact("model_stage1.json"))?;
    write_json(&m.artifact("history_stage1.json"), &history)?;
    m.finish()
}

fn cmd_weights(a: WeightsArgs) -> Result<()> {
    let params = ModelParams::load(&a.model)?;
    let data = load_fvec_dataset(&a.data)?;
    let cfg = train_config(a.config.as_deref(), default_stage2_config())?;
    let probs = synthetic_config(a.synthetic_config.as_deref())?.observation_probs;
    let eval1 = evaluate_stage1(&params.encoder, &params.head, &data)?;
    let w = compute_weights(a.estimator, &eval1, &data, &cfg, Some(&probs))?;

    let mut m = Manifest::new("weights", &a.out)?;
    m.config(a.config.as_deref())?;
    m.config(a.synthetic_config.as_deref())?;
    write_weights_csv(m.artifact("weights.csv"), &w.weights, w.groups.as_deref())?;
    if let Some(table) = &w.propensity {
        write_json(&m.artifact("propensity.json"), table)?;
    }
    m.finish()
}

fn cmd_train2(a: Train2Args) -> Result<()> {
    let params = ModelParams::load(&a.model)?;
    let data = load_fvec_dataset(&a.data)?;
    let mut cfg = train_config(a.config.as_deref(), default_stage2_config())?;
    if let Some(s) = a.seed {
        cfg.seed = RngSeed(s);
    }
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if let Some(v) = a.variant {
        cfg.pns_variant = v;
    }
    if let Some(w) = a.warm_start {
        cfg.warm_start_head = w;
    }
    cfg.validate()?;
    let weights = match &a.weights {
        Some(p) => read_weights_csv(p)?,
        None => vec![1.0; data.len()],
    };
    let (head, history) = train_stage2(&params.encoder, &params.head, &data, &weights, &cfg)?;

    let mut m = Manifest::new("train2", &a.out)?;
    m.seed(cfg.seed.0);
    m.config(a.config.as_deref())?;
    ModelParams {
        encoder: params.encoder,
        head,
    }
    .save(m.artifact("model.json"))?;
    write_json(&m.artifact("history_stage2.json"), &history)?;
    m.finish()
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let params = ModelParams::load(&a.model)?;
    let data = load_fvec_dataset(&a.data)?;
    let metrics = evaluate(&params.encoder, &params.head, &data)?;
    print!("{}", metrics.render_table());
    let mut m = Manifest::new("eval", &a.out)?;
    write_json(&m.artifact("metrics.json"), &metrics)?;
    m.finish()
}

fn cmd_attribute(a: AttributeArgs) -> Result<()> {
    let params = ModelParams::load(&a.model)?;
    let data = load_fvec_dataset(&a.data)?;
    let blocks = match &a.blocks {
        Some(text) => BlockSpec::parse(text)?,
        None => {
            let cfg = synthetic_config(a.synthetic_config.as_deref())?;
            BlockSpec::causal_spurious(cfg.causal_dim, cfg.spurious_dim)
        }
    };
    let report = occlusion_attribution(&params.encoder, &params.head, &data, &blocks, RngSeed(a.seed))?;
    let mut m = Manifest::new("attribute", &a.out)?;
    m.seed(a.seed);
    m.config(a.synthetic_config.as_deref())?;
    write_json(&m.artifact("attribution.json"), &report)?;
    m.finish()
}

fn cmd_run(a: ExperimentArgs) -> Result<()> {
    let spec = experiment_spec(&a)?;
    let out = out_dir(&a, &spec)?;
    let seed = spec.seeds[0];
    let data = spec.prepare(seed)?;
    let outcome = run_pipeline(&data, &spec.stage1, &spec.stage2, seed)?;

    let mut m = Manifest::new("run", &out)?;
    m.seed(seed.0);
    m.config(a.config.as_deref())?;
    outcome.stage1_params().save(m.artifact("model_stage1.json"))?;
    outcome.params().save(m.artifact("model.json"))?;
    write_json(&m.artifact("history_stage1.json"), &outcome.stage1_history)?;
    write_json(&m.artifact("history_stage2.json"), &outcome.stage2_history)?;
    write_weights_csv(m.artifact("weights.csv"), &outcome.weights.weights, outcome.weights.groups.as_deref())?;
    if let Some(metrics) = &outcome.metrics {
        print!("{}", metrics.render_table());
        write_json(&m.artifact("metrics.json"), metrics)?;
    }
    if let Some(attr) = &outcome.attribution {
        write_json(&m.artifact("attribution.json"), attr)?;
    }
    m.finish()
}

#[derive(Serialize)]
struct SweepSummary {
    seed: RngSeed,
    selected_lambda: Option<f64>,
    points: Vec<ccr_core::experiment::SweepPoint>,
}

fn cmd_sweep(a: ExperimentArgs) -> Result<()> {
    let spec = experiment_spec(&a)?;
    let out = out_dir(&a, &spec)?;
    let seed = spec.seeds[0];
    let data = spec.prepare(seed)?;
    let points = lambda_sweep(&data, &spec.stage1, &spec.stage2, &spec.lambdas, seed)?;

    let mut m = Manifest::new("sweep", &out)?;
    m.seed(seed.0);
    m.config(a.config.as_deref())?;
    for p in &points {
        let dir = format!("lambda_{}", p.lambda);
        std::fs::create_dir_all(out.join(&dir))?;
        write_json(&m.artifact(&format!("{dir}/metrics.json")), &p.metrics)?;
        println!(
            "lambda {:>6}  mean {:.4}  wga {:.4}  pns {:.4}",
            p.lambda, p.metrics.mean_accuracy, p.metrics.worst_group_accuracy, p.final_pns_penalty
        );
    }
    write_json(
        &m.artifact("sweep.json"),
        &SweepSummary {
            seed,
            selected_lambda: select_lambda(&points),
            points,
        },
    )?;
    m.finish()
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let spec = experiment_spec(&a.experiment)?;
    let out = out_dir(&a.experiment, &spec)?;
    let (beta, lambda) = (spec.stage1.beta, spec.stage2.lambda);
    let (methods, name) = if a.ablation {
        (ablation_grid(beta, lambda), "ablation.json")
    } else {
        (method_table(beta, lambda), "comparison.json")
    };
    let table = spec.compare(&methods, threads())?;
    print!("{}", table.render_table());

    let mut m = Manifest::new("compare", &out)?;
    m.config(a.experiment.config.as_deref())?;
    write_json(&m.artifact(name), &table)?;
    m.finish()
}
