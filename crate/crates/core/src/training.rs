//! Policy-gradient training on click logs: exposure-based IPS and CRM, the
//! naive and action-based baselines, REINFORCE gradients with an average-reward
//! control variate, and early stopping on validation clicks.
//!
//! Clicks are folded into per-(query, document) reward tables once, so an
//! epoch costs the same regardless of how many interactions the log holds.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::click::{ClickLog, LogEntry};
use crate::data::{Query, QueryId, RankingDataset, SplitTag};
use crate::error::{Error, Result};
use crate::estimators::ProfileSet;
use crate::policy::{
    add_log_prob_grad, log_prob_from_logits, sample_from_logits, ExposureMode, ExposureModel,
    PlackettLucePolicy,
};
use crate::propensity::{estimate_exposure_propensities, ActionProduct, PropensityEstimates};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    Naive,
    ExposureIps,
    ActionIps,
    ActionCrm { lambda: f64 },
    ExposureCrm { delta: f64 },
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Naive => "naive",
            Objective::ExposureIps => "exposure_ips",
            Objective::ActionIps => "action_ips",
            Objective::ActionCrm { .. } => "action_crm",
            Objective::ExposureCrm { .. } => "exposure_crm",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Objective::ExposureCrm { delta } if !(delta > 0.0 && delta < 1.0) => {
                Err(Error::Config(format!("exposure_crm needs delta in (0, 1), got {delta}")))
            }
            Objective::ActionCrm { lambda } if !(lambda > 0.0 && lambda.is_finite()) => {
                Err(Error::Config(format!("action_crm needs lambda > 0, got {lambda}")))
            }
            _ => Ok(()),
        }
    }

    fn is_action(&self) -> bool {
        matches!(self, Objective::ActionIps | Objective::ActionCrm { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub learning_rate: f64,
    /// Queries per gradient step.
    pub batch_size: usize,
    /// Rankings sampled per query for each REINFORCE estimate.
    pub rankings_per_query_sample: usize,
    /// Independent rankings per query used to re-estimate the current exposure.
    pub exposure_samples: usize,
    /// Rankings per query for the validation utility (fixed draws across epochs).
    pub validation_samples: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Rescale the step gradient to this norm when it is larger.
    pub max_grad_norm: Option<f64>,
    /// Confidence used for the risk column of objectives that carry no delta.
    pub report_delta: f64,
    pub action_product: ActionProduct,
    /// Floor on the estimated logging exposure inside the divergence and the
    /// risk term, used when lower than the clip floor. `None` uses the
    /// clipped estimates of the utility.
    pub divergence_floor: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::ExposureCrm { delta: 1e-5 },
            learning_rate: 0.5,
            batch_size: 32,
            rankings_per_query_sample: 32,
            exposure_samples: 64,
            validation_samples: 256,
            max_epochs: 150,
            patience: 20,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            max_grad_norm: None,
            report_delta: 1e-5,
            action_product: ActionProduct::AllRanks,
            divergence_floor: Some(0.01),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.rankings_per_query_sample == 0 || self.exposure_samples == 0 {
            return Err(Error::Config(
                "batch_size, rankings_per_query_sample and exposure_samples must be positive".into(),
            ));
        }
        if self.validation_samples == 0 {
            return Err(Error::Config("validation_samples must be positive".into()));
        }
        if !(self.report_delta > 0.0 && self.report_delta < 1.0) {
            return Err(Error::Config(format!("report_delta must lie in (0, 1), got {}", self.report_delta)));
        }
        if let Some(f) = self.divergence_floor {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("divergence_floor must lie in (0, 1], got {f}")));
            }
        }
        if let Some(m) = self.max_grad_norm {
            if !(m > 0.0) {
                return Err(Error::Config(format!("max_grad_norm must be positive, got {m}")));
            }
        }
        if let OptimizerKind::Adam { beta1, beta2, epsilon } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(epsilon > 0.0) {
                return Err(Error::Config("adam needs betas in [0, 1) and epsilon > 0".into()));
            }
        }
        Ok(())
    }

    fn delta(&self) -> f64 {
        match self.objective {
            Objective::ExposureCrm { delta } => delta,
            _ => self.report_delta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub objective: f64,
    pub validation_utility: f64,
    pub divergence: f64,
    pub risk: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TrainRecord>,
    pub best_epoch: usize,
    pub best_checkpoint: PlackettLucePolicy,
}

impl TrainTrace {
    pub const CSV_HEADER: &'static str = "epoch,objective,validation_utility,divergence,risk";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.objective, r.validation_utility, r.divergence, r.risk
            ));
        }
        out
    }

    pub fn best(&self) -> &TrainRecord {
        self.records
            .iter()
            .find(|r| r.epoch == self.best_epoch)
            .expect("best epoch is recorded")
    }
}

/// Derives an independent stream seed from a base seed and a path of labels.
pub fn stream_seed(seed: u64, labels: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    labels.iter().fold(splitmix(seed), |acc, &l| splitmix(acc ^ splitmix(l)))
}

fn stream(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, labels))
}

/// REINFORCE estimate of `∂/∂logits E_y[Σ_k w_k v(y_k)]` from `samples` rankings.
///
/// With `baseline`, the per-query average reward is subtracted and the sum is
/// divided by `S - 1` instead of `S`, which keeps the estimate unbiased.
pub fn reinforce_logit_grad<R: Rng + ?Sized>(
    logits: &[f64],
    len: usize,
    position_weights: &[f64],
    values: &[f64],
    samples: usize,
    baseline: bool,
    rng: &mut R,
) -> Vec<f64> {
    let mut grad = vec![0.0; logits.len()];
    if samples == 0 {
        return grad;
    }
    let draws: Vec<(Vec<usize>, f64)> = (0..samples)
        .map(|_| {
            let y = sample_from_logits(logits, len, rng);
            let r = y
                .iter()
                .enumerate()
                .map(|(k, &d)| position_weights.get(k).copied().unwrap_or(0.0) * values[d])
                .sum();
            (y, r)
        })
        .collect();
    let (b, scale) = if baseline && samples > 1 {
        let mean = draws.iter().map(|(_, r)| r).sum::<f64>() / samples as f64;
        (mean, 1.0 / (samples - 1) as f64)
    } else {
        (0.0, 1.0 / samples as f64)
    };
    for (y, r) in &draws {
        let coef = (r - b) * scale;
        if coef != 0.0 {
            add_log_prob_grad(logits, y, coef, &mut grad);
        }
    }
    grad
}

/// Chain rule from softmax inputs to scorer parameters.
fn backprop_logits(policy: &PlackettLucePolicy, query: &Query, grad_logits: &[f64], grad_params: &mut [f64]) {
    let inv_t = 1.0 / policy.temperature;
    let grad_scores: Vec<f64> = grad_logits.iter().map(|g| g * inv_t).collect();
    policy.scorer.backprop(query, &grad_scores, grad_params);
}

/// Exposure profile of the current policy for each query, estimated afresh.
/// Monte Carlo draws use a per-query stream so results do not depend on order.
pub fn recompute_exposure_cache(
    policy: &PlackettLucePolicy,
    queries: &[&Query],
    model: &ExposureModel,
    mode: ExposureMode,
    seed: u64,
) -> Result<ProfileSet> {
    queries
        .par_iter()
        .map(|q| {
            let mut rng = stream(seed, &[q.id]);
            Ok((q.id, policy.expected_exposure(q, model, mode, &mut rng)?))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}

/// Per-query click rewards `W(q,d) = (1/N) Σ_i c_i(d)/ρ̂0(d)` and interaction mass `n_q/N`.
#[derive(Debug, Clone)]
struct ClickTable {
    index: usize,
    mass: f64,
    values: Vec<f64>,
    /// `1/ρ̂0(d)` as seen by the divergence and the risk term.
    inv_propensity: Vec<f64>,
    groups: Vec<ActionGroup>,
}

#[derive(Debug, Clone)]
struct ActionGroup {
    ranking: Vec<usize>,
    clicks: f64,
    clicks_sq: f64,
    inv_propensity: f64,
}

fn build_tables(
    entries: &[LogEntry],
    dataset: &RankingDataset,
    propensities: &PropensityEstimates,
    risk_propensities: &PropensityEstimates,
    unit_propensity: bool,
    action_product: Option<ActionProduct>,
) -> Result<Vec<ClickTable>> {
    let index = dataset.index();
    let n = entries.len().max(1) as f64;
    let mut tables: BTreeMap<QueryId, ClickTable> = BTreeMap::new();
    let mut groups: BTreeMap<QueryId, BTreeMap<Vec<usize>, (f64, f64)>> = BTreeMap::new();
    for e in entries {
        let &qi = index.get(&e.query_id).ok_or(Error::UnknownQuery(e.query_id))?;
        let query = &dataset.queries[qi];
        let table = tables.entry(e.query_id).or_insert_with(|| ClickTable {
            index: qi,
            mass: 0.0,
            values: vec![0.0; query.len()],
            inv_propensity: (0..query.len())
                .map(|d| {
                    let p = risk_propensities.exposure(query.id, d);
                    if p > 0.0 {
                        1.0 / p
                    } else {
                        0.0
                    }
                })
                .collect(),
            groups: Vec::new(),
        });
        table.mass += 1.0 / n;
        for (_, d) in e.clicked_docs() {
            let w = if unit_propensity {
                1.0
            } else {
                let p = propensities.exposure(e.query_id, d);
                if p <= 0.0 {
                    return Err(Error::ZeroPropensity {
                        query: e.query_id,
                        doc: d,
                    });
                }
                1.0 / p
            };
            table.values[d] += w / n;
        }
        if action_product.is_some() {
            let c = e.num_clicks() as f64;
            let g = groups.entry(e.query_id).or_default().entry(e.ranking.clone()).or_default();
            g.0 += c;
            g.1 += c * c;
        }
    }
    if let Some(product) = action_product {
        for (q, gs) in groups {
            let table = tables.get_mut(&q).expect("table exists for every logged query");
            for (ranking, (clicks, clicks_sq)) in gs {
                let p0 = propensities
                    .estimate_action_propensity(q, &ranking, product)?
                    .max(propensities.clip_floor);
                table.groups.push(ActionGroup {
                    ranking,
                    clicks,
                    clicks_sq,
                    inv_propensity: if p0 > 0.0 { 1.0 / p0 } else { 0.0 },
                });
            }
        }
    }
    Ok(tables.into_values().collect())
}

/// REINFORCE estimate of the gradient of the exposure-IPS utility over a batch
/// of log entries (`1/|batch|` normalization). Queries absent from the batch
/// contribute nothing.
pub fn utility_gradient<R: Rng + ?Sized>(
    policy: &PlackettLucePolicy,
    dataset: &RankingDataset,
    batch: &[LogEntry],
    propensities: &PropensityEstimates,
    model: &ExposureModel,
    samples: usize,
    baseline: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let tables = build_tables(batch, dataset, propensities, propensities, false, None)?;
    let base = rng.gen::<u64>();
    let grads = tables
        .par_iter()
        .map(|t| {
            let query = &dataset.queries[t.index];
            let logits = policy.logits(query);
            let mut rng = stream(base, &[query.id]);
            let g = reinforce_logit_grad(
                &logits,
                policy.ranking_len(query.len()),
                model.probs(),
                &t.values,
                samples,
                baseline,
                &mut rng,
            );
            let mut out = vec![0.0; policy.scorer.num_params()];
            backprop_logits(policy, query, &g, &mut out);
            out
        })
        .collect::<Vec<_>>();
    Ok(sum_in_order(grads, policy.scorer.num_params()))
}

fn sum_in_order(parts: Vec<Vec<f64>>, dim: usize) -> Vec<f64> {
    let mut total = vec![0.0; dim];
    for p in parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// `Σ_q mass_q Σ_d ρ(d)²/(Z ρ̂0(d))` plus the mass-weighted `Z`.
fn divergence_from_cache(tables: &[ClickTable], dataset: &RankingDataset, cache: &ProfileSet) -> (f64, f64) {
    let mut d2 = 0.0;
    let mut z = 0.0;
    for t in tables {
        let prof = &cache[&dataset.queries[t.index].id];
        let per: f64 = prof
            .rho
            .iter()
            .zip(&t.inv_propensity)
            .map(|(r, inv)| r * r * inv)
            .sum::<f64>()
            / prof.z;
        d2 += t.mass * per;
        z += t.mass * prof.z;
    }
    (d2, z)
}

/// Coefficient `sqrt((1-δ)/(N δ Z d2))` in front of the risk gradient.
fn risk_coefficient(d2: f64, z: f64, n: usize, delta: f64) -> f64 {
    ((1.0 - delta) / (n as f64 * delta * z * d2)).sqrt()
}

/// REINFORCE estimate of the gradient of `sqrt((Z/n)((1-δ)/δ) d2)`, where `d2`
/// is the divergence between `profiles` (current policy) and the logging
/// exposure in `propensities`, averaged over queries with `query_mass`.
pub fn risk_gradient<R: Rng + ?Sized>(
    policy: &PlackettLucePolicy,
    dataset: &RankingDataset,
    profiles: &ProfileSet,
    propensities: &PropensityEstimates,
    query_mass: &BTreeMap<QueryId, f64>,
    model: &ExposureModel,
    n: usize,
    delta: f64,
    samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("delta must lie in (0, 1), got {delta}")));
    }
    let index = dataset.index();
    let total: f64 = query_mass.values().sum();
    let tables = query_mass
        .iter()
        .map(|(&q, &m)| {
            let &qi = index.get(&q).ok_or(Error::UnknownQuery(q))?;
            let query = &dataset.queries[qi];
            if !profiles.contains_key(&q) {
                return Err(Error::UnknownQuery(q));
            }
            Ok(ClickTable {
                index: qi,
                mass: m / total,
                values: vec![0.0; query.len()],
                inv_propensity: (0..query.len()).map(|d| 1.0 / propensities.exposure(q, d)).collect(),
                groups: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (d2, z) = divergence_from_cache(&tables, dataset, profiles);
    if !(d2 > 0.0) {
        return Err(Error::Validation("risk gradient needs a positive divergence".into()));
    }
    let coef = risk_coefficient(d2, z, n, delta);
    let base = rng.gen::<u64>();
    let grads = tables
        .par_iter()
        .map(|t| {
            let query = &dataset.queries[t.index];
            let rho = &profiles[&query.id].rho;
            let values: Vec<f64> = rho
                .iter()
                .zip(&t.inv_propensity)
                .map(|(r, inv)| coef * t.mass * r * inv)
                .collect();
            let mut rng = stream(base, &[query.id]);
            let logits = policy.logits(query);
            let g = reinforce_logit_grad(
                &logits,
                policy.ranking_len(query.len()),
                model.probs(),
                &values,
                samples,
                true,
                &mut rng,
            );
            let mut out = vec![0.0; policy.scorer.num_params()];
            backprop_logits(policy, query, &g, &mut out);
            out
        })
        .collect::<Vec<_>>();
    Ok(sum_in_order(grads, policy.scorer.num_params()))
}

/// Parameter update rule, with optional gradient-norm rescaling.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    max_grad_norm: Option<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, max_grad_norm: Option<f64>, dim: usize) -> Self {
        Optimizer {
            kind,
            learning_rate,
            max_grad_norm,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// Ascent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &mut [f64]) {
        if let Some(max) = self.max_grad_norm {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max {
                grad.iter_mut().for_each(|g| *g *= max / norm);
            }
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad.iter()) {
                    *p += self.learning_rate * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    params[i] += self.learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + epsilon);
                }
            }
        }
    }
}

pub struct TrainInputs<'a> {
    pub train: &'a RankingDataset,
    pub validation: &'a RankingDataset,
    pub train_log: &'a ClickLog,
    pub validation_log: &'a ClickLog,
    pub model: &'a ExposureModel,
}

struct EpochStats {
    objective: f64,
    divergence: f64,
    risk: f64,
    action_utility: f64,
    action_variance: f64,
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    inputs: &'a TrainInputs<'a>,
    tables: Vec<ClickTable>,
    validation_tables: Vec<ClickTable>,
    n: usize,
}

const LABEL_SHUFFLE: u64 = 1;
const LABEL_EXPOSURE: u64 = 2;
const LABEL_REINFORCE: u64 = 3;
const LABEL_EPOCH_EXPOSURE: u64 = 4;
const LABEL_VALIDATION: u64 = 5;

impl Trainer<'_> {
    fn train_queries(&self) -> Vec<&Query> {
        self.tables.iter().map(|t| &self.inputs.train.queries[t.index]).collect()
    }

    fn validation_utility(&self, policy: &PlackettLucePolicy) -> Result<f64> {
        let queries: Vec<&Query> = self
            .validation_tables
            .iter()
            .map(|t| &self.inputs.validation.queries[t.index])
            .collect();
        let cache = recompute_exposure_cache(
            policy,
            &queries,
            self.inputs.model,
            ExposureMode::MonteCarlo {
                samples: self.config.validation_samples,
            },
            stream_seed(self.config.seed, &[LABEL_VALIDATION]),
        )?;
        Ok(self
            .validation_tables
            .iter()
            .map(|t| {
                let rho = &cache[&self.inputs.validation.queries[t.index].id].rho;
                rho.iter().zip(&t.values).map(|(r, w)| r * w).sum::<f64>()
            })
            .sum())
    }

    fn action_moments(&self, policy: &PlackettLucePolicy) -> (f64, f64) {
        let n = self.n as f64;
        let (s1, s2) = self
            .tables
            .iter()
            .map(|t| {
                let logits = policy.logits(&self.inputs.train.queries[t.index]);
                t.groups.iter().fold((0.0, 0.0), |acc, g| {
                    let w = log_prob_from_logits(&logits, &g.ranking).exp() * g.inv_propensity;
                    (acc.0 + w * g.clicks, acc.1 + w * w * g.clicks_sq)
                })
            })
            .fold((0.0, 0.0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
        let mean = s1 / n;
        let var = if self.n > 1 { ((s2 - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
        (mean, var)
    }

    fn epoch_stats(&self, policy: &PlackettLucePolicy, cache: &ProfileSet) -> EpochStats {
        let (d2, z) = divergence_from_cache(&self.tables, self.inputs.train, cache);
        let delta = self.config.delta();
        let risk = ((z / self.n as f64) * ((1.0 - delta) / delta) * d2).sqrt();
        let exposure_utility: f64 = self
            .tables
            .iter()
            .map(|t| {
                let rho = &cache[&self.inputs.train.queries[t.index].id].rho;
                rho.iter().zip(&t.values).map(|(r, w)| r * w).sum::<f64>()
            })
            .sum();
        let (action_utility, action_variance) = if self.config.objective.is_action() {
            self.action_moments(policy)
        } else {
            (0.0, 0.0)
        };
        let objective = match self.config.objective {
            Objective::Naive | Objective::ExposureIps => exposure_utility,
            Objective::ExposureCrm { .. } => exposure_utility - risk,
            Objective::ActionIps => action_utility,
            Objective::ActionCrm { lambda } => action_utility - lambda * (action_variance / self.n as f64).sqrt(),
        };
        EpochStats {
            objective,
            divergence: d2,
            risk,
            action_utility,
            action_variance,
        }
    }

    fn step_gradient(
        &self,
        policy: &PlackettLucePolicy,
        batch: &[usize],
        cache: &ProfileSet,
        stats: &EpochStats,
        labels: [u64; 2],
    ) -> Vec<f64> {
        let dim = policy.scorer.num_params();
        let model = self.inputs.model;
        let coef = match self.config.objective {
            Objective::ExposureCrm { delta } => {
                let (d2, z) = divergence_from_cache(&self.tables, self.inputs.train, cache);
                risk_coefficient(d2, z, self.n, delta)
            }
            _ => 0.0,
        };
        let kappa = match self.config.objective {
            Objective::ActionCrm { lambda } if stats.action_variance > 0.0 && self.n > 1 => {
                lambda / ((self.n as f64 - 1.0) * (self.n as f64 * stats.action_variance).sqrt())
            }
            _ => 0.0,
        };
        let n = self.n as f64;
        let parts = batch
            .par_iter()
            .map(|&ti| {
                let t = &self.tables[ti];
                let query = &self.inputs.train.queries[t.index];
                let logits = policy.logits(query);
                let mut g = vec![0.0; logits.len()];
                if self.config.objective.is_action() {
                    for grp in &t.groups {
                        let w = log_prob_from_logits(&logits, &grp.ranking).exp() * grp.inv_propensity;
                        let c = w * grp.clicks / n * (1.0 + kappa * n * stats.action_utility) - kappa * w * w * grp.clicks_sq;
                        if c != 0.0 {
                            add_log_prob_grad(&logits, &grp.ranking, c, &mut g);
                        }
                    }
                } else {
                    let rho = &cache[&query.id].rho;
                    let values: Vec<f64> = if coef > 0.0 {
                        t.values
                            .iter()
                            .zip(rho.iter().zip(&t.inv_propensity))
                            .map(|(w, (r, inv))| w - coef * t.mass * r * inv)
                            .collect()
                    } else {
                        t.values.clone()
                    };
                    let mut rng = stream(self.config.seed, &[LABEL_REINFORCE, labels[0], labels[1], query.id]);
                    g = reinforce_logit_grad(
                        &logits,
                        policy.ranking_len(query.len()),
                        model.probs(),
                        &values,
                        self.config.rankings_per_query_sample,
                        true,
                        &mut rng,
                    );
                }
                let mut out = vec![0.0; dim];
                backprop_logits(policy, query, &g, &mut out);
                out
            })
            .collect::<Vec<_>>();
        let mut grad = sum_in_order(parts, dim);
        let scale = self.tables.len() as f64 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        grad
    }
}

fn diverged(epoch: usize, records: &[TrainRecord], what: &str) -> Error {
    let tail: Vec<String> = records
        .iter()
        .rev()
        .take(3)
        .rev()
        .map(|r| {
            format!(
                "epoch {} objective {} validation {} divergence {} risk {}",
                r.epoch, r.objective, r.validation_utility, r.divergence, r.risk
            )
        })
        .collect();
    Error::Diverged {
        epoch,
        message: format!("{what}; last records: [{}]", tail.join("; ")),
    }
}

/// Stochastic gradient ascent on the configured objective, starting at
/// `initial`. Returns the checkpoint with the best validation utility
/// (epoch 0 is the initial policy).
pub fn train(
    config: &TrainConfig,
    initial: PlackettLucePolicy,
    inputs: &TrainInputs<'_>,
) -> Result<(PlackettLucePolicy, TrainTrace)> {
    config.validate()?;
    let n = inputs.train_log.n();
    if n == 0 || inputs.validation_log.is_empty() {
        return Err(Error::Validation("training needs nonempty train and validation logs".into()));
    }
    let raw = estimate_exposure_propensities(inputs.train_log, inputs.model)?;
    let train_props = raw.clip(n, SplitTag::Train);
    let risk_props = raw.for_divergence(n, config.divergence_floor);
    let validation_props = estimate_exposure_propensities(inputs.validation_log, inputs.model)?;
    let action = if config.objective.is_action() {
        Some(config.action_product)
    } else {
        None
    };
    let unit = config.objective == Objective::Naive;
    let trainer = Trainer {
        config,
        inputs,
        tables: build_tables(&inputs.train_log.entries, inputs.train, &train_props, &risk_props, unit, action)?,
        validation_tables: build_tables(
            &inputs.validation_log.entries,
            inputs.validation,
            &validation_props,
            &validation_props,
            false,
            None,
        )?,
        n,
    };
    let queries = trainer.train_queries();
    let mc = ExposureMode::MonteCarlo {
        samples: config.exposure_samples,
    };

    let mut policy = initial;
    let mut optimizer = Optimizer::new(
        config.optimizer,
        config.learning_rate,
        config.max_grad_norm,
        policy.scorer.num_params(),
    );
    let mut cache = recompute_exposure_cache(
        &policy,
        &queries,
        inputs.model,
        mc,
        stream_seed(config.seed, &[LABEL_EPOCH_EXPOSURE, 0]),
    )?;
    let mut stats = trainer.epoch_stats(&policy, &cache);
    let mut records = vec![TrainRecord {
        epoch: 0,
        objective: stats.objective,
        validation_utility: trainer.validation_utility(&policy)?,
        divergence: stats.divergence,
        risk: stats.risk,
    }];
    if !records[0].objective.is_finite() {
        return Err(diverged(0, &records, "initial objective is not finite"));
    }
    let mut best = (0usize, records[0].validation_utility, policy.clone());
    let mut order: Vec<usize> = (0..trainer.tables.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut stream(config.seed, &[LABEL_SHUFFLE, epoch as u64]));
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let labels = [epoch as u64, step as u64];
            if !config.objective.is_action() {
                let batch_queries: Vec<&Query> = batch
                    .iter()
                    .map(|&ti| &inputs.train.queries[trainer.tables[ti].index])
                    .collect();
                let fresh = recompute_exposure_cache(
                    &policy,
                    &batch_queries,
                    inputs.model,
                    mc,
                    stream_seed(config.seed, &[LABEL_EXPOSURE, labels[0], labels[1]]),
                )?;
                cache.extend(fresh);
            }
            let mut grad = trainer.step_gradient(&policy, batch, &cache, &stats, labels);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged(epoch, &records, "gradient is not finite"));
            }
            optimizer.step(policy.scorer.params_mut(), &mut grad);
        }
        if policy.scorer.params().iter().any(|p| !p.is_finite()) {
            return Err(diverged(epoch, &records, "parameters are not finite"));
        }
        cache = recompute_exposure_cache(
            &policy,
            &queries,
            inputs.model,
            mc,
            stream_seed(config.seed, &[LABEL_EPOCH_EXPOSURE, epoch as u64]),
        )?;
        stats = trainer.epoch_stats(&policy, &cache);
        let record = TrainRecord {
            epoch,
            objective: stats.objective,
            validation_utility: trainer.validation_utility(&policy)?,
            divergence: stats.divergence,
            risk: stats.risk,
        };
        records.push(record);
        if !record.objective.is_finite() || !record.validation_utility.is_finite() {
            return Err(diverged(epoch, &records, "objective is not finite"));
        }
        if record.validation_utility > best.1 {
            best = (epoch, record.validation_utility, policy.clone());
        } else if epoch - best.0 >= config.patience {
            break;
        }
    }
    let trace = TrainTrace {
        records,
        best_epoch: best.0,
        best_checkpoint: best.2.clone(),
    };
    Ok((best.2, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::click::{simulate_log, RelevanceMapping};
    use crate::data::{generate_synthetic, split, SyntheticSpec};
    use crate::policy::Scorer;

    fn setup() -> (RankingDataset, RankingDataset, ClickLog, ClickLog, PlackettLucePolicy) {
        let ds = generate_synthetic(&SyntheticSpec {
            num_queries: 30,
            docs_per_query: 8,
            feature_dim: 4,
            ..Default::default()
        })
        .unwrap();
        let s = split(&ds, (0.6, 0.2, 0.2), 1).unwrap();
        let logging = PlackettLucePolicy::new(Scorer::linear_with(vec![0.5, 0.1, -0.2, 0.3]), 5, 1.0).unwrap();
        let model = ExposureModel::top5();
        let mapping = RelevanceMapping::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tl = simulate_log(&logging, &s.train, &model, &mapping, 300, &mut rng).unwrap();
        let vl = simulate_log(&logging, &s.validation, &model, &mapping, 100, &mut rng).unwrap();
        (s.train, s.validation, tl, vl, logging)
    }

    fn small_config(objective: Objective) -> TrainConfig {
        TrainConfig {
            objective,
            max_epochs: 3,
            rankings_per_query_sample: 8,
            exposure_samples: 16,
            validation_samples: 16,
            batch_size: 4,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(small_config(Objective::ExposureCrm { delta: 1.0 }).validate().is_err());
        assert!(small_config(Objective::ActionCrm { lambda: 0.0 }).validate().is_err());
        assert!(small_config(Objective::ExposureIps).validate().is_ok());
        let text = toml::to_string(&small_config(Objective::ActionCrm { lambda: 0.1 })).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, small_config(Objective::ActionCrm { lambda: 0.1 }));
    }

    #[test]
    fn zero_learning_rate_returns_initial_policy() {
        let (train_ds, val_ds, tl, vl, logging) = setup();
        let model = ExposureModel::top5();
        let inputs = TrainInputs {
            train: &train_ds,
            validation: &val_ds,
            train_log: &tl,
            validation_log: &vl,
            model: &model,
        };
        let config = TrainConfig {
            learning_rate: 0.0,
            ..small_config(Objective::ExposureIps)
        };
        let (p, _) = train(&config, logging.clone(), &inputs).unwrap();
        assert_eq!(p, logging);
    }

    #[test]
    fn every_objective_runs_and_is_deterministic() {
        let (train_ds, val_ds, tl, vl, logging) = setup();
        let model = ExposureModel::top5();
        let inputs = TrainInputs {
            train: &train_ds,
            validation: &val_ds,
            train_log: &tl,
            validation_log: &vl,
            model: &model,
        };
        for objective in [
            Objective::Naive,
            Objective::ExposureIps,
            Objective::ActionIps,
            Objective::ActionCrm { lambda: 0.1 },
            Objective::ExposureCrm { delta: 0.05 },
        ] {
            let config = small_config(objective);
            let (a, ta) = train(&config, logging.clone(), &inputs).unwrap();
            let (b, tb) = train(&config, logging.clone(), &inputs).unwrap();
            assert_eq!(a, b, "{}", objective.name());
            assert_eq!(ta, tb);
            assert_eq!(ta.records[0].epoch, 0);
            assert_eq!(ta.best_checkpoint, a);
            let best = ta.best();
            assert!(ta.records.iter().all(|r| r.validation_utility <= best.validation_utility));
            assert_eq!(ta.to_csv().lines().count(), ta.records.len() + 1);
        }
    }

    #[test]
    fn zero_clicks_give_zero_gradient() {
        let (train_ds, _, tl, _, logging) = setup();
        let batch: Vec<LogEntry> = tl
            .entries
            .iter()
            .take(20)
            .map(|e| LogEntry {
                clicks: vec![false; e.clicks.len()],
                ..e.clone()
            })
            .collect();
        let props = estimate_exposure_propensities(&tl, &ExposureModel::top5()).unwrap();
        let g = utility_gradient(
            &logging,
            &train_ds,
            &batch,
            &props,
            &ExposureModel::top5(),
            16,
            true,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn adam_and_clipping_move_parameters() {
        let mut opt = Optimizer::new(
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            0.1,
            Some(1.0),
            2,
        );
        let mut p = vec![0.0, 0.0];
        let mut g = vec![30.0, -40.0];
        opt.step(&mut p, &mut g);
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] + 0.8).abs() < 1e-12);
        assert!((p[0] - 0.1).abs() < 1e-6 && (p[1] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn stream_seeds_differ() {
        assert_ne!(stream_seed(1, &[1, 2]), stream_seed(1, &[2, 1]));
        assert_ne!(stream_seed(1, &[1]), stream_seed(2, &[1]));
        assert_eq!(stream_seed(7, &[3]), stream_seed(7, &[3]));
    }
}
