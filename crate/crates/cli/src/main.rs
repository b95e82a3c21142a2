//! `cltr`: data generation, click simulation, counterfactual training,
//! evaluation and the experiment grid from the command line.
//!
//! Every verb resolves its configuration from defaults, then flags, then the
//! `--config` file (file values win), and writes the resolved configuration
//! to `manifest.toml` in its output directory. A manifest written by a
//! previous run is itself a valid `--config`.
//!
//! Exit codes: 0 success, 1 run failure, 2 configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use cltr_core::click::{simulate_log, ClickLog, RelevanceMapping};
use cltr_core::data::{generate_synthetic, load_svmlight_ranking, save_svmlight_ranking, SyntheticSpec};
use cltr_core::eval::{evaluate, EvalMode, Gain};
use cltr_core::experiment::summary::{summarize, summary_to_csv, summary_to_table};
use cltr_core::experiment::{
    plots, prepare, run_grid, write_manifest, DatasetSource, ExperimentGrid, Method, ScorerSpec,
};
use cltr_core::policy::{ExposureModel, PlackettLucePolicy};
use cltr_core::training::{stream_seed, train, Objective, TrainConfig, TrainInputs};
use cltr_core::Error as CoreError;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Parser)]
#[command(name = "cltr", version, about = "Safe counterfactual learning to rank experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic ranking dataset in SVMlight format.
    GenData(GenDataArgs),
    /// Split a dataset and fit the logging policy on a labelled query subset.
    TrainLogging(GridArgs),
    /// Simulate a click log from a policy on a dataset.
    Simulate(SimulateArgs),
    /// Train a policy from click logs.
    Train(TrainArgs),
    /// NDCG@k and true utility of a policy on a labelled dataset.
    Evaluate(EvaluateArgs),
    /// Run the full experiment grid.
    Grid(GridArgs),
    /// Aggregate a results.csv into means and standard deviations.
    Summarize(SummarizeArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration; its values override flags. Manifests are accepted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    docs: Option<usize>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    /// SVMlight dataset instead of the synthetic benchmark.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    /// Comma-separated training log sizes.
    #[arg(long, value_delimiter = ',')]
    n_values: Option<Vec<usize>>,
    /// Comma-separated confidence levels for exposure_crm.
    #[arg(long, value_delimiter = ',')]
    deltas: Option<Vec<f64>>,
    /// Comma-separated penalty weights for action_crm.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Number of logged interactions.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    train_data: PathBuf,
    #[arg(long)]
    validation_data: PathBuf,
    #[arg(long)]
    train_log: PathBuf,
    #[arg(long)]
    validation_log: PathBuf,
    /// Starting policy; a small random policy when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    /// naive, exposure_ips, exposure_crm, action_ips or action_crm.
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    cutoff: Option<usize>,
    /// Monte Carlo rankings per query; 0 enumerates exactly.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SummarizeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    results: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimulateConfig {
    n: usize,
    seed: u64,
    exposure_probs: Vec<f64>,
    relevance: RelevanceMapping,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            n: 1000,
            seed: 0,
            exposure_probs: ExposureModel::top5().probs().to_vec(),
            relevance: RelevanceMapping::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainRunConfig {
    train: TrainConfig,
    exposure_probs: Vec<f64>,
    truncation_k: usize,
    scorer: ScorerSpec,
    /// Scale of the random initial parameters when no policy is given.
    init_scale: f64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            train: TrainConfig::default(),
            exposure_probs: ExposureModel::top5().probs().to_vec(),
            truncation_k: 5,
            scorer: ScorerSpec::default(),
            init_scale: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvaluateConfig {
    cutoff: usize,
    samples: usize,
    seed: u64,
    gain: Gain,
    exposure_probs: Vec<f64>,
    relevance: RelevanceMapping,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            cutoff: 5,
            samples: 1000,
            seed: 0,
            gain: Gain::Linear,
            exposure_probs: ExposureModel::top5().probs().to_vec(),
            relevance: RelevanceMapping::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SummarizeConfig {
    results: PathBuf,
}

/// Failure classes that map onto exit codes.
#[derive(Debug)]
enum Failure {
    Config(String),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<CoreError>() {
            Some(CoreError::Config(_)) => Failure::Config(format!("{e:#}")),
            _ => Failure::Run(e),
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        Failure::from(anyhow::Error::new(e))
    }
}

type Outcome = Result<(), Failure>;

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

/// Recursively overlays `top` onto `base`; tables merge, other values replace.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies the `--config` file over `from_flags`. A manifest's `config` table
/// is used when the file is a manifest written for the same command.
fn resolve<T: Serialize + DeserializeOwned>(from_flags: T, config: Option<&Path>, command: &str) -> Result<T, Failure> {
    let Some(path) = config else {
        return Ok(from_flags);
    };
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    let mut file: toml::Value =
        toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    if let Some(cmd) = file.get("command").and_then(|c| c.as_str()) {
        if cmd != command {
            return Err(config_err(format!(
                "{} is a manifest for `{cmd}`, not `{command}`",
                path.display()
            )));
        }
        file = file
            .get("config")
            .cloned()
            .ok_or_else(|| config_err(format!("{}: manifest has no config table", path.display())))?;
    }
    let mut base = toml::Value::try_from(&from_flags).map_err(|e| config_err(format!("cannot serialize flags: {e}")))?;
    merge(&mut base, file);
    base.try_into::<T>()
        .map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(Failure::Run)
}

fn gen_data(args: GenDataArgs) -> Outcome {
    let mut spec = SyntheticSpec::default();
    if let Some(v) = args.queries {
        spec.num_queries = v;
    }
    if let Some(v) = args.docs {
        spec.docs_per_query = v;
    }
    if let Some(v) = args.features {
        spec.feature_dim = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    let spec = resolve(spec, args.common.config.as_deref(), "gen-data")?;
    let out = &args.common.out;
    ensure_dir(out)?;
    write_manifest(out, "gen-data", &spec)?;
    let dataset = generate_synthetic(&spec)?;
    let path = out.join("dataset.txt");
    save_svmlight_ranking(&dataset, &path)?;
    println!("wrote {} queries to {}", dataset.len(), path.display());
    Ok(())
}

fn grid_from_flags(args: &GridArgs) -> Result<ExperimentGrid, Failure> {
    let mut grid = ExperimentGrid::default();
    if let Some(p) = &args.data {
        grid.dataset = DatasetSource::File { path: p.clone() };
    }
    if let Some(v) = args.seed {
        grid.seed = v;
    }
    if let Some(v) = args.runs {
        grid.runs = v;
    }
    if let Some(v) = &args.n_values {
        grid.n_values = v.clone();
    }
    if let Some(v) = &args.deltas {
        grid.delta_values = v.clone();
    }
    if let Some(v) = &args.lambdas {
        grid.lambda_values = v.clone();
    }
    if let Some(v) = &args.methods {
        grid.methods = v
            .iter()
            .map(|m| m.parse::<Method>())
            .collect::<Result<_, _>>()
            .map_err(|e| config_err(e.to_string()))?;
    }
    if let Some(v) = args.epochs {
        grid.train.max_epochs = v;
    }
    if let Some(v) = args.learning_rate {
        grid.train.learning_rate = v;
    }
    Ok(grid)
}

fn train_logging(args: GridArgs) -> Outcome {
    let grid = resolve(grid_from_flags(&args)?, args.common.config.as_deref(), "train-logging")?;
    grid.validate()?;
    let out = &args.common.out;
    ensure_dir(out)?;
    write_manifest(out, "train-logging", &grid)?;
    let setup = prepare(&grid)?;
    save_svmlight_ranking(&setup.splits.train, out.join("train.txt"))?;
    save_svmlight_ranking(&setup.splits.validation, out.join("validation.txt"))?;
    save_svmlight_ranking(&setup.splits.test, out.join("test.txt"))?;
    setup.logging.save(out.join("logging_policy.txt"))?;
    println!(
        "logging policy written to {} ({} train / {} validation / {} test queries)",
        out.join("logging_policy.txt").display(),
        setup.splits.train.len(),
        setup.splits.validation.len(),
        setup.splits.test.len()
    );
    Ok(())
}

fn simulate(args: SimulateArgs) -> Outcome {
    let mut config = SimulateConfig::default();
    if let Some(v) = args.n {
        config.n = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    let config = resolve(config, args.common.config.as_deref(), "simulate")?;
    let model = ExposureModel::new(config.exposure_probs.clone())?;
    let mapping = RelevanceMapping::new(config.relevance.slope, config.relevance.offset)?;
    if config.n == 0 {
        return Err(config_err("n must be at least 1"));
    }
    let out = &args.common.out;
    ensure_dir(out)?;
    write_manifest(out, "simulate", &config)?;
    let policy = PlackettLucePolicy::load(&args.policy)?;
    let dataset = load_svmlight_ranking(&args.data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, &[1]));
    let log = simulate_log(&policy, &dataset, &model, &mapping, config.n, &mut rng)?;
    let path = out.join("log.txt");
    log.save(&path)?;
    println!("wrote {} interactions to {}", log.n(), path.display());
    Ok(())
}

fn objective_from_flags(name: &str, delta: Option<f64>, lambda: Option<f64>) -> Result<Objective, Failure> {
    Ok(match name {
        "naive" => Objective::Naive,
        "exposure_ips" => Objective::ExposureIps,
        "action_ips" => Objective::ActionIps,
        "exposure_crm" => Objective::ExposureCrm {
            delta: delta.unwrap_or(1e-5),
        },
        "action_crm" => {
            let d = delta.unwrap_or(1e-5);
            Objective::ActionCrm {
                lambda: lambda.unwrap_or(((1.0 - d) / d).sqrt()),
            }
        }
        other => return Err(config_err(format!("unknown objective {other:?}"))),
    })
}

fn train_cmd(args: TrainArgs) -> Outcome {
    let mut config = TrainRunConfig::default();
    let t = &mut config.train;
    if let Some(name) = &args.objective {
        t.objective = objective_from_flags(name, args.delta, args.lambda)?;
    } else if let Some(d) = args.delta {
        t.objective = Objective::ExposureCrm { delta: d };
    }
    if let Some(v) = args.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = args.epochs {
        t.max_epochs = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    let config = resolve(config, args.common.config.as_deref(), "train")?;
    config.train.validate()?;
    let model = ExposureModel::new(config.exposure_probs.clone())?;
    let out = &args.common.out;
    ensure_dir(out)?;
    write_manifest(out, "train", &config)?;

    let train_ds = load_svmlight_ranking(&args.train_data)?;
    let validation_ds = load_svmlight_ranking(&args.validation_data)?;
    let train_log = ClickLog::load(&args.train_log)?;
    let validation_log = ClickLog::load(&args.validation_log)?;
    let initial = match &args.init {
        Some(p) => PlackettLucePolicy::load(p)?,
        None => {
            let mut scorer = config.scorer.build(train_ds.feature_dim);
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.train.seed, &[2]));
            scorer.init_random(&mut rng, config.init_scale);
            PlackettLucePolicy::new(scorer, config.truncation_k, 1.0)?
        }
    };
    let inputs = TrainInputs {
        train: &train_ds,
        validation: &validation_ds,
        train_log: &train_log,
        validation_log: &validation_log,
        model: &model,
    };
    let (policy, trace) = train(&config.train, initial, &inputs)?;
    policy.save(out.join("policy.txt"))?;
    let trace_path = out.join("trace.csv");
    fs::write(&trace_path, trace.to_csv())
        .with_context(|| format!("cannot write {}", trace_path.display()))
        .map_err(Failure::Run)?;
    println!(
        "{}: best epoch {} of {}, policy written to {}",
        config.train.objective.name(),
        trace.best_epoch,
        trace.records.len() - 1,
        out.join("policy.txt").display()
    );
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> Outcome {
    let mut config = EvaluateConfig::default();
    if let Some(v) = args.cutoff {
        config.cutoff = v;
    }
    if let Some(v) = args.samples {
        config.samples = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    let config = resolve(config, args.common.config.as_deref(), "evaluate")?;
    let model = ExposureModel::new(config.exposure_probs.clone())?;
    let mapping = RelevanceMapping::new(config.relevance.slope, config.relevance.offset)?;
    if config.cutoff == 0 {
        return Err(config_err("cutoff must be at least 1"));
    }
    let out = &args.common.out;
    ensure_dir(out)?;
    write_manifest(out, "evaluate", &config)?;
    let policy = PlackettLucePolicy::load(&args.policy)?;
    let dataset = load_svmlight_ranking(&args.data)?;
    let mode = if config.samples == 0 {
        EvalMode::Exact
    } else {
        EvalMode::MonteCarlo {
            samples: config.samples,
            seed: config.seed,
        }
    };
    let report = evaluate(&policy, &dataset, config.cutoff, &model, &mapping, mode, config.gain)?;
    let text = format!(
        "ndcg_at_{}\t{}\ntrue_expected_clicks\t{}\n",
        config.cutoff, report.ndcg_at_k, report.true_expected_clicks
    );
    let path = out.join("evaluation.tsv");
    fs::write(&path, &text)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(Failure::Run)?;
    print!("{text}");
    Ok(())
}

fn grid_cmd(args: GridArgs) -> Outcome {
    let grid = resolve(grid_from_flags(&args)?, args.common.config.as_deref(), "grid")?;
    grid.validate()?;
    let out = &args.common.out;
    ensure_dir(out)?;
    let outcome = run_grid(&grid, out)?;
    println!(
        "{} rows written to {} ({} failed)",
        outcome.rows.len(),
        outcome.results_path.display(),
        outcome.failed
    );
    if outcome.failed > 0 {
        return Err(Failure::Run(anyhow::anyhow!("{} runs failed; see the status column", outcome.failed)));
    }
    Ok(())
}

fn summarize_cmd(args: SummarizeArgs) -> Outcome {
    let config = resolve(
        SummarizeConfig { results: args.results },
        args.common.config.as_deref(),
        "summarize",
    )?;
    let out = &args.common.out;
    ensure_dir(out)?;
    write_manifest(out, "summarize", &config)?;
    let text = fs::read_to_string(&config.results)
        .with_context(|| format!("cannot read {}", config.results.display()))
        .map_err(Failure::Run)?;
    let rows = summarize(&text)?;
    let table = summary_to_table(&rows);
    for (name, body) in [("summary.csv", summary_to_csv(&rows)), ("summary.txt", table.clone())] {
        let path = out.join(name);
        fs::write(&path, body)
            .with_context(|| format!("cannot write {}", path.display()))
            .map_err(Failure::Run)?;
    }
    plots::plot_results_csv(&text, &out.join("plots"))?;
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainLogging(a) => train_logging(a),
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Grid(a) => grid_cmd(a),
        Command::Summarize(a) => summarize_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
