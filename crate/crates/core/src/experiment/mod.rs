//! Experiment grid: sweep log sizes, confidence levels and methods over
//! independent seeds, and write results, traces, plots and a manifest.
//!
//! Every random stream is derived from the grid seed and the run's position
//! in the grid, so a grid reproduces its `results.csv` exactly. Wall-clock
//! times go to a separate `timings.csv` for that reason.

pub mod plots;
pub mod summary;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::click::{simulate_log, ClickLog, RelevanceMapping};
use crate::data::{generate_synthetic, load_svmlight_ranking, sample_queries, split, RankingDataset, Splits, SyntheticSpec};
use crate::error::{Error, Result};
use crate::estimators::{empirical_exposure_divergence, exposure_risk};
use crate::eval::{evaluate, EvalMode, Gain};
use crate::policy::{ExposureMode, ExposureModel, PlackettLucePolicy, Scorer, ScorerKind};
use crate::propensity::estimate_exposure_propensities;
use crate::supervised::{train_supervised, SupervisedConfig};
use crate::training::{recompute_exposure_cache, stream_seed, train, Objective, TrainConfig, TrainInputs, TrainTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Logging,
    Skyline,
    Naive,
    ActionIps,
    ActionCrm,
    ExposureIps,
    ExposureCrm,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Logging,
        Method::Skyline,
        Method::Naive,
        Method::ActionIps,
        Method::ActionCrm,
        Method::ExposureIps,
        Method::ExposureCrm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Logging => "logging",
            Method::Skyline => "skyline",
            Method::Naive => "naive",
            Method::ActionIps => "action_ips",
            Method::ActionCrm => "action_crm",
            Method::ExposureIps => "exposure_ips",
            Method::ExposureCrm => "exposure_crm",
        }
    }

    /// Methods whose numbers do not come from learning on clicks.
    pub fn is_reference(self) -> bool {
        matches!(self, Method::Logging | Method::Skyline)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
    },
    File {
        path: PathBuf,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic {
            spec: SyntheticSpec::default(),
        }
    }
}

impl DatasetSource {
    pub fn load(&self) -> Result<RankingDataset> {
        match self {
            DatasetSource::Synthetic { spec } => generate_synthetic(spec),
            DatasetSource::File { path } => load_svmlight_ranking(path),
        }
    }
}

/// Where click-trained policies start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitKind {
    /// Small zero-mean random parameters: a near-uniform policy.
    Random { scale: f64 },
    /// A copy of the logging policy's parameters.
    Logging,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSpec {
    pub kind: ScorerKind,
    pub hidden: Vec<usize>,
}

impl Default for ScorerSpec {
    fn default() -> Self {
        ScorerSpec {
            kind: ScorerKind::Linear,
            hidden: Vec::new(),
        }
    }
}

impl ScorerSpec {
    pub fn build(&self, input_dim: usize) -> Scorer {
        match self.kind {
            ScorerKind::Linear => Scorer::linear(input_dim),
            ScorerKind::Mlp => Scorer::mlp(input_dim, &self.hidden),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentGrid {
    /// Training log sizes, strictly increasing.
    pub n_values: Vec<usize>,
    /// Confidence levels for exposure_crm rows.
    pub delta_values: Vec<f64>,
    /// Penalty weights for action_crm rows. Empty means one weight per delta,
    /// `sqrt((1-δ)/δ)`, the Cantelli factor the exposure risk uses.
    pub lambda_values: Vec<f64>,
    pub methods: Vec<Method>,
    /// Independent repetitions per cell.
    pub runs: usize,
    pub seed: u64,
    pub dataset: DatasetSource,
    pub split_fractions: [f64; 3],
    /// Share of training queries with labels for fitting the logging policy.
    pub logging_fraction: f64,
    pub truncation_k: usize,
    pub exposure_probs: Vec<f64>,
    pub relevance: RelevanceMapping,
    pub scorer: ScorerSpec,
    pub init: InitKind,
    pub train: TrainConfig,
    pub logging_training: SupervisedConfig,
    pub skyline_training: SupervisedConfig,
    pub cutoff: usize,
    /// Rankings per test query for NDCG and true utility.
    pub eval_samples: usize,
    /// Rankings per training query for the reported divergence.
    pub divergence_samples: usize,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        ExperimentGrid {
            n_values: vec![100, 316, 1_000, 3_162, 10_000, 31_623, 100_000, 316_228, 1_000_000],
            delta_values: vec![1e-5],
            lambda_values: Vec::new(),
            methods: vec![
                Method::Logging,
                Method::Skyline,
                Method::Naive,
                Method::ActionIps,
                Method::ActionCrm,
                Method::ExposureIps,
                Method::ExposureCrm,
            ],
            runs: 10,
            seed: 2024,
            dataset: DatasetSource::default(),
            split_fractions: [0.6, 0.2, 0.2],
            logging_fraction: 0.03,
            truncation_k: 5,
            exposure_probs: ExposureModel::top5().probs().to_vec(),
            relevance: RelevanceMapping::default(),
            scorer: ScorerSpec::default(),
            init: InitKind::Random { scale: 0.01 },
            train: TrainConfig::default(),
            logging_training: SupervisedConfig::default(),
            skyline_training: SupervisedConfig::default(),
            cutoff: 5,
            eval_samples: 1000,
            divergence_samples: 1000,
        }
    }
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.n_values.is_empty() || self.n_values[0] == 0 || self.n_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("n_values must be positive and strictly increasing".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.delta_values.is_empty() || self.delta_values.iter().any(|&d| !(d > 0.0 && d < 1.0)) {
            return Err(Error::Config("delta_values must be nonempty and lie in (0, 1)".into()));
        }
        if self.lambda_values.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Config("lambda_values must be positive".into()));
        }
        if !(self.logging_fraction > 0.0 && self.logging_fraction <= 1.0) {
            return Err(Error::Config("logging_fraction must lie in (0, 1]".into()));
        }
        if self.truncation_k == 0 || self.cutoff == 0 || self.eval_samples == 0 || self.divergence_samples == 0 {
            return Err(Error::Config(
                "truncation_k, cutoff, eval_samples and divergence_samples must be positive".into(),
            ));
        }
        if let InitKind::Random { scale } = self.init {
            if !(scale >= 0.0 && scale.is_finite()) {
                return Err(Error::Config("random init scale must be >= 0".into()));
            }
        }
        ExposureModel::new(self.exposure_probs.clone())?;
        RelevanceMapping::new(self.relevance.slope, self.relevance.offset)?;
        self.train.validate()?;
        self.logging_training.validate()?;
        self.skyline_training.validate()
    }

    pub fn exposure_model(&self) -> Result<ExposureModel> {
        ExposureModel::new(self.exposure_probs.clone())
    }

    fn lambdas(&self) -> Vec<f64> {
        if self.lambda_values.is_empty() {
            self.delta_values.iter().map(|d| ((1.0 - d) / d).sqrt()).collect()
        } else {
            self.lambda_values.clone()
        }
    }

    /// Every (method, delta, lambda) combination a cell trains or evaluates.
    pub fn variants(&self) -> Vec<Variant> {
        let mut methods = self.methods.clone();
        methods.sort();
        methods.dedup();
        let mut out = Vec::new();
        for m in methods {
            match m {
                Method::ExposureCrm => out.extend(self.delta_values.iter().map(|&d| Variant {
                    method: m,
                    delta: Some(d),
                    lambda: None,
                })),
                Method::ActionCrm => out.extend(self.lambdas().into_iter().map(|l| Variant {
                    method: m,
                    delta: None,
                    lambda: Some(l),
                })),
                _ => out.push(Variant {
                    method: m,
                    delta: None,
                    lambda: None,
                }),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variant {
    pub method: Method,
    pub delta: Option<f64>,
    pub lambda: Option<f64>,
}

impl Variant {
    pub fn objective(&self) -> Option<Objective> {
        match self.method {
            Method::Logging | Method::Skyline => None,
            Method::Naive => Some(Objective::Naive),
            Method::ExposureIps => Some(Objective::ExposureIps),
            Method::ActionIps => Some(Objective::ActionIps),
            Method::ExposureCrm => Some(Objective::ExposureCrm {
                delta: self.delta.expect("exposure_crm variants carry a delta"),
            }),
            Method::ActionCrm => Some(Objective::ActionCrm {
                lambda: self.lambda.expect("action_crm variants carry a lambda"),
            }),
        }
    }

    pub fn label(&self) -> String {
        match (self.delta, self.lambda) {
            (Some(d), _) => format!("{}_d{d:e}", self.method),
            (_, Some(l)) => format!("{}_l{l:e}", self.method),
            _ => self.method.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub n: usize,
    pub delta: Option<f64>,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub status: String,
    pub ndcg_at_5: Option<f64>,
    pub true_utility: Option<f64>,
    pub divergence: Option<f64>,
    pub risk: Option<f64>,
    pub best_epoch: Option<usize>,
    #[serde(skip)]
    pub wall_time: f64,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    fn sort_key(&self) -> (Method, usize, u64, u64, u64) {
        (
            self.method,
            self.n,
            self.delta.map_or(0, f64::to_bits),
            self.lambda.map_or(0, f64::to_bits),
            self.seed,
        )
    }
}

pub fn rows_to_csv(rows: &[ResultRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Validation(format!("csv write: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv write: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Validation(format!("csv write: {e}")))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Data, splits and logging policy shared by every cell of a grid.
#[derive(Debug, Clone)]
pub struct Setup {
    pub splits: Splits,
    pub logging: PlackettLucePolicy,
    pub model: ExposureModel,
}

const LABEL_SPLIT: u64 = 101;
const LABEL_LOGGING: u64 = 102;
const LABEL_SKYLINE: u64 = 103;
const LABEL_LOG: u64 = 104;
const LABEL_TRAIN: u64 = 105;
const LABEL_EVAL: u64 = 106;
const LABEL_DIVERGENCE: u64 = 107;

fn rng(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, labels))
}

/// Fits the logging policy on labels from a `logging_fraction` share of the
/// training queries.
pub fn train_logging_policy(
    grid: &ExperimentGrid,
    train_split: &RankingDataset,
    seed: u64,
) -> Result<PlackettLucePolicy> {
    let labelled = sample_queries(train_split, grid.logging_fraction, stream_seed(seed, &[LABEL_LOGGING]))?;
    let mut scorer = grid.scorer.build(train_split.feature_dim);
    scorer.init_random(&mut rng(seed, &[LABEL_LOGGING, 1]), 0.01);
    let initial = PlackettLucePolicy::new(scorer, grid.truncation_k, 1.0)?;
    let config = SupervisedConfig {
        seed: stream_seed(seed, &[LABEL_LOGGING, 2]),
        ..grid.logging_training.clone()
    };
    Ok(train_supervised(&config, initial, &labelled, None)?.0)
}

pub fn train_skyline_policy(grid: &ExperimentGrid, splits: &Splits, run: u64) -> Result<PlackettLucePolicy> {
    let mut scorer = grid.scorer.build(splits.train.feature_dim);
    scorer.init_random(&mut rng(grid.seed, &[LABEL_SKYLINE, run]), 0.01);
    let initial = PlackettLucePolicy::new(scorer, grid.truncation_k, 1.0)?;
    let config = SupervisedConfig {
        seed: stream_seed(grid.seed, &[LABEL_SKYLINE, run, 1]),
        ..grid.skyline_training.clone()
    };
    Ok(train_supervised(&config, initial, &splits.train, Some(&splits.validation))?.0)
}

pub fn prepare(grid: &ExperimentGrid) -> Result<Setup> {
    grid.validate()?;
    let dataset = grid.dataset.load()?;
    let [a, b, c] = grid.split_fractions;
    let splits = split(&dataset, (a, b, c), stream_seed(grid.seed, &[LABEL_SPLIT]))?;
    let logging = train_logging_policy(grid, &splits.train, grid.seed)?;
    Ok(Setup {
        splits,
        logging,
        model: grid.exposure_model()?,
    })
}

/// Validation log size matching the training log's per-query rate.
pub fn validation_log_size(n: usize, splits: &Splits) -> usize {
    ((n as f64 * splits.validation.len() as f64 / splits.train.len() as f64).round() as usize).max(1)
}

/// Training and validation logs for one (n, run) cell.
pub fn simulate_cell_logs(grid: &ExperimentGrid, setup: &Setup, n: usize, run: u64) -> Result<(ClickLog, ClickLog)> {
    let mut r = rng(grid.seed, &[LABEL_LOG, n as u64, run]);
    let train_log = simulate_log(&setup.logging, &setup.splits.train, &setup.model, &grid.relevance, n, &mut r)?;
    let val_n = validation_log_size(n, &setup.splits);
    let validation_log = simulate_log(&setup.logging, &setup.splits.validation, &setup.model, &grid.relevance, val_n, &mut r)?;
    Ok((train_log, validation_log))
}

/// Initial policy for click-based training in a cell.
pub fn initial_policy(grid: &ExperimentGrid, setup: &Setup, n: usize, run: u64) -> Result<PlackettLucePolicy> {
    match grid.init {
        InitKind::Logging => Ok(setup.logging.clone()),
        InitKind::Random { scale } => {
            let mut scorer = grid.scorer.build(setup.splits.train.feature_dim);
            scorer.init_random(&mut rng(grid.seed, &[LABEL_TRAIN, n as u64, run, 1]), scale);
            PlackettLucePolicy::new(scorer, grid.truncation_k, 1.0)
        }
    }
}

pub struct RowMetrics {
    pub ndcg: f64,
    pub true_utility: f64,
    pub divergence: f64,
    pub risk: f64,
}

/// Test-split NDCG and true utility, and divergence/risk against the logging
/// estimate from `train_log` as the risk term sees it.
pub fn measure(
    grid: &ExperimentGrid,
    setup: &Setup,
    policy: &PlackettLucePolicy,
    train_log: &ClickLog,
    delta: f64,
) -> Result<RowMetrics> {
    let report = evaluate(
        policy,
        &setup.splits.test,
        grid.cutoff,
        &setup.model,
        &grid.relevance,
        EvalMode::MonteCarlo {
            samples: grid.eval_samples,
            seed: stream_seed(grid.seed, &[LABEL_EVAL]),
        },
        Gain::Linear,
    )?;
    let n = train_log.n();
    let estimates = estimate_exposure_propensities(train_log, &setup.model)?.for_divergence(n, grid.train.divergence_floor);
    let index = setup.splits.train.index();
    let queries: Vec<_> = estimates
        .queries
        .keys()
        .map(|q| {
            index
                .get(q)
                .map(|&i| &setup.splits.train.queries[i])
                .ok_or(Error::UnknownQuery(*q))
        })
        .collect::<Result<_>>()?;
    let profiles = recompute_exposure_cache(
        policy,
        &queries,
        &setup.model,
        ExposureMode::MonteCarlo {
            samples: grid.divergence_samples,
        },
        stream_seed(grid.seed, &[LABEL_DIVERGENCE]),
    )?;
    let divergence = empirical_exposure_divergence(train_log, &profiles, &estimates)?;
    let z = train_log.entries.iter().map(|e| profiles[&e.query_id].z).sum::<f64>() / n as f64;
    let risk = exposure_risk(divergence, z, n, delta)?;
    Ok(RowMetrics {
        ndcg: report.ndcg_at_k,
        true_utility: report.true_expected_clicks,
        divergence,
        risk,
    })
}

/// Trains one click-based variant in a cell.
pub fn train_variant(
    grid: &ExperimentGrid,
    setup: &Setup,
    objective: Objective,
    logs: &(ClickLog, ClickLog),
    n: usize,
    run: u64,
) -> Result<(PlackettLucePolicy, TrainTrace)> {
    let config = TrainConfig {
        objective,
        seed: stream_seed(grid.seed, &[LABEL_TRAIN, n as u64, run]),
        ..grid.train.clone()
    };
    let inputs = TrainInputs {
        train: &setup.splits.train,
        validation: &setup.splits.validation,
        train_log: &logs.0,
        validation_log: &logs.1,
        model: &setup.model,
    };
    train(&config, initial_policy(grid, setup, n, run)?, &inputs)
}

struct CellOutput {
    rows: Vec<ResultRow>,
    traces: Vec<(String, String)>,
}

fn failed_row(v: &Variant, n: usize, run: u64, err: &Error, wall: f64) -> ResultRow {
    ResultRow {
        method: v.method,
        n,
        delta: v.delta,
        lambda: v.lambda,
        seed: run,
        status: format!("failed: {err}").replace(['\n', ','], " "),
        ndcg_at_5: None,
        true_utility: None,
        divergence: None,
        risk: None,
        best_epoch: None,
        wall_time: wall,
    }
}

fn run_cell(grid: &ExperimentGrid, setup: &Setup, skyline: &[Result<PlackettLucePolicy>], n: usize, run: u64) -> CellOutput {
    let variants = grid.variants();
    let mut out = CellOutput {
        rows: Vec::new(),
        traces: Vec::new(),
    };
    let logs = match simulate_cell_logs(grid, setup, n, run) {
        Ok(l) => l,
        Err(e) => {
            out.rows = variants.iter().map(|v| failed_row(v, n, run, &e, 0.0)).collect();
            return out;
        }
    };
    for v in &variants {
        let start = Instant::now();
        let trained: Result<(PlackettLucePolicy, Option<TrainTrace>)> = match v.method {
            Method::Logging => Ok((setup.logging.clone(), None)),
            Method::Skyline => match &skyline[run as usize] {
                Ok(p) => Ok((p.clone(), None)),
                Err(e) => Err(Error::Validation(format!("skyline training failed: {e}"))),
            },
            _ => train_variant(grid, setup, v.objective().expect("click-based variant"), &logs, n, run)
                .map(|(p, t)| (p, Some(t))),
        };
        let delta = v.delta.unwrap_or(grid.train.report_delta);
        let row = trained.and_then(|(policy, trace)| {
            let m = measure(grid, setup, &policy, &logs.0, delta)?;
            let best_epoch = trace.as_ref().map(|t| t.best_epoch);
            if let Some(t) = trace {
                out.traces.push((format!("{}_n{n}_s{run}.csv", v.label()), t.to_csv()));
            }
            Ok(ResultRow {
                method: v.method,
                n,
                delta: v.delta,
                lambda: v.lambda,
                seed: run,
                status: "ok".into(),
                ndcg_at_5: Some(m.ndcg),
                true_utility: Some(m.true_utility),
                divergence: Some(m.divergence),
                risk: Some(m.risk),
                best_epoch,
                wall_time: 0.0,
            })
        });
        let wall = start.elapsed().as_secs_f64();
        out.rows.push(match row {
            Ok(r) => ResultRow { wall_time: wall, ..r },
            Err(e) => failed_row(v, n, run, &e, wall),
        });
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest<'a, T: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub config: &'a T,
}

/// Writes `manifest.toml` with the fully resolved configuration of a command.
pub fn write_manifest<T: Serialize>(dir: &Path, command: &str, config: &T) -> Result<PathBuf> {
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(format!("cannot serialize manifest: {e}")))?;
    let path = dir.join("manifest.toml");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub rows: Vec<ResultRow>,
    pub failed: usize,
    pub results_path: PathBuf,
}

/// Runs every (n, run) cell of the grid and writes `results.csv`,
/// `timings.csv`, `traces/`, `plots/`, `logging_policy.txt` and `manifest.toml`
/// under `output_dir`. Failed runs are kept as rows with a failure status.
pub fn run_grid(grid: &ExperimentGrid, output_dir: &Path) -> Result<GridOutcome> {
    grid.validate()?;
    let traces_dir = output_dir.join("traces");
    fs::create_dir_all(&traces_dir).map_err(|e| Error::io(&traces_dir, e))?;
    write_manifest(output_dir, "grid", grid)?;
    let setup = prepare(grid)?;
    setup.logging.save(output_dir.join("logging_policy.txt"))?;

    let runs: Vec<u64> = (0..grid.runs as u64).collect();
    let skyline: Vec<Result<PlackettLucePolicy>> = if grid.methods.contains(&Method::Skyline) {
        runs.par_iter().map(|&r| train_skyline_policy(grid, &setup.splits, r)).collect()
    } else {
        runs.iter().map(|_| Err(Error::Config("skyline not requested".into()))).collect()
    };
    let cells: Vec<(usize, u64)> = grid
        .n_values
        .iter()
        .flat_map(|&n| runs.iter().map(move |&r| (n, r)))
        .collect();
    let outputs: Vec<CellOutput> = cells
        .par_iter()
        .map(|&(n, r)| run_cell(grid, &setup, &skyline, n, r))
        .collect();

    let mut rows = Vec::new();
    for o in outputs {
        for (name, text) in o.traces {
            write(&traces_dir.join(name), &text)?;
        }
        rows.extend(o.rows);
    }
    rows.sort_by_key(ResultRow::sort_key);
    let csv_text = rows_to_csv(&rows)?;
    let results_path = output_dir.join("results.csv");
    write(&results_path, &csv_text)?;
    let mut timings = String::from("method,n,delta,lambda,seed,wall_time\n");
    for r in &rows {
        timings.push_str(&format!(
            "{},{},{},{},{},{:.3}\n",
            r.method,
            r.n,
            r.delta.map(|d| d.to_string()).unwrap_or_default(),
            r.lambda.map(|l| l.to_string()).unwrap_or_default(),
            r.seed,
            r.wall_time
        ));
    }
    write(&output_dir.join("timings.csv"), &timings)?;
    plots::plot_results(&rows, &output_dir.join("plots"))?;
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    Ok(GridOutcome {
        rows,
        failed,
        results_path,
    })
}
