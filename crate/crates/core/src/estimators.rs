//! Utility estimators, divergences and the risk terms built on them.
//!
//! Everything here is a deterministic function of its inputs and sums in a
//! fixed order (log order, then document order), so results do not depend on
//! how callers parallelise around them.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::click::ClickLog;
use crate::data::{Query, QueryId, RankingDataset};
use crate::error::{Error, Result};
use crate::policy::{ExposureProfile, PlackettLucePolicy};
use crate::propensity::{ActionProduct, PropensityEstimates};

/// Target-policy exposure for each query that may appear in a log.
pub type ProfileSet = BTreeMap<QueryId, ExposureProfile>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Naive,
    ExposureIps,
    ActionIps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UtilityEstimate {
    pub value: f64,
    pub estimator_kind: EstimatorKind,
    pub n: usize,
}

fn profile(target: &ProfileSet, query: QueryId) -> Result<&ExposureProfile> {
    target.get(&query).ok_or(Error::UnknownQuery(query))
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Per-interaction terms `Σ_d ρ(d)/ρ̂0(d) · c_i(d)`.
pub fn exposure_ips_terms(log: &ClickLog, target: &ProfileSet, propensities: &PropensityEstimates) -> Result<Vec<f64>> {
    log.entries
        .iter()
        .map(|e| {
            let prof = profile(target, e.query_id)?;
            e.clicked_docs().try_fold(0.0, |acc, (_, d)| {
                let p0 = propensities.exposure(e.query_id, d);
                if p0 <= 0.0 {
                    return Err(Error::ZeroPropensity {
                        query: e.query_id,
                        doc: d,
                    });
                }
                Ok(acc + prof.rho[d] / p0)
            })
        })
        .collect()
}

/// Clicks weighted by target exposure, with no bias correction.
pub fn naive_utility(log: &ClickLog, target: &ProfileSet) -> Result<UtilityEstimate> {
    let terms = log
        .entries
        .iter()
        .map(|e| {
            let prof = profile(target, e.query_id)?;
            Ok(e.clicked_docs().map(|(_, d)| prof.rho[d]).sum())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(UtilityEstimate {
        value: mean(&terms),
        estimator_kind: EstimatorKind::Naive,
        n: log.n(),
    })
}

pub fn exposure_ips_utility(
    log: &ClickLog,
    target: &ProfileSet,
    propensities: &PropensityEstimates,
) -> Result<UtilityEstimate> {
    let terms = exposure_ips_terms(log, target, propensities)?;
    Ok(UtilityEstimate {
        value: mean(&terms),
        estimator_kind: EstimatorKind::ExposureIps,
        n: log.n(),
    })
}

/// Source of logging-policy ranking probabilities `π0(y|q)`.
#[derive(Debug, Clone, Copy)]
pub enum LoggingPropensity<'a> {
    Estimates(&'a PropensityEstimates, ActionProduct),
    Policy(&'a PlackettLucePolicy),
}

impl LoggingPropensity<'_> {
    pub fn prob(&self, query: &Query, ranking: &[usize]) -> Result<f64> {
        match self {
            LoggingPropensity::Estimates(est, product) => {
                est.estimate_action_propensity(query.id, ranking, *product)
            }
            LoggingPropensity::Policy(policy) => Ok(policy.log_prob(query, ranking)?.exp()),
        }
    }
}

/// Per-interaction terms `π(y_i|q_i)/π̂0(y_i|q_i) · Σ_d c_i(d)`.
pub fn action_ips_terms(
    log: &ClickLog,
    dataset: &RankingDataset,
    target: &PlackettLucePolicy,
    logging: LoggingPropensity<'_>,
) -> Result<Vec<f64>> {
    let index = dataset.index();
    log.entries
        .iter()
        .map(|e| {
            let clicks = e.num_clicks();
            if clicks == 0 {
                return Ok(0.0);
            }
            let query = &dataset.queries[*index.get(&e.query_id).ok_or(Error::UnknownQuery(e.query_id))?];
            let p0 = logging.prob(query, &e.ranking)?;
            if p0 <= 0.0 {
                return Err(Error::InvalidRanking {
                    query: e.query_id,
                    reason: "logged ranking has zero logging probability".into(),
                });
            }
            let p = target.log_prob(query, &e.ranking)?.exp();
            Ok(p / p0 * clicks as f64)
        })
        .collect()
}

pub fn action_ips_utility(
    log: &ClickLog,
    dataset: &RankingDataset,
    target: &PlackettLucePolicy,
    logging: LoggingPropensity<'_>,
) -> Result<UtilityEstimate> {
    let terms = action_ips_terms(log, dataset, target, logging)?;
    Ok(UtilityEstimate {
        value: mean(&terms),
        estimator_kind: EstimatorKind::ActionIps,
        n: log.n(),
    })
}

/// `Σ_d ρ'0(d) (ρ'(d)/ρ'0(d))²` for one query.
pub fn query_exposure_divergence(query: QueryId, target: &ExposureProfile, logging: &ExposureProfile) -> Result<f64> {
    target
        .normalized
        .iter()
        .zip(&logging.normalized)
        .enumerate()
        .try_fold(0.0, |acc, (d, (&p, &p0))| {
            if p0 > 0.0 {
                Ok(acc + p * p / p0)
            } else if p > 0.0 {
                Err(Error::SupportViolation { query, doc: d })
            } else {
                Ok(acc)
            }
        })
}

/// Exponentiated second-order Rényi divergence between normalized exposure
/// distributions, averaged over queries with the given (unnormalized) weights.
pub fn exposure_divergence(
    target: &ProfileSet,
    logging: &ProfileSet,
    query_weights: &BTreeMap<QueryId, f64>,
) -> Result<f64> {
    let total: f64 = query_weights.values().sum();
    if !(total > 0.0) {
        return Err(Error::Validation("query weights must have positive mass".into()));
    }
    let mut acc = 0.0;
    for (&q, &w) in query_weights {
        if w == 0.0 {
            continue;
        }
        let t = profile(target, q)?;
        let l = profile(logging, q)?;
        acc += w * query_exposure_divergence(q, t, l)?;
    }
    Ok(acc / total)
}

/// Sample-based divergence over the log's queries, using estimated logging
/// exposure normalized by the target's `Z`.
pub fn empirical_exposure_divergence(
    log: &ClickLog,
    target: &ProfileSet,
    propensities: &PropensityEstimates,
) -> Result<f64> {
    if log.is_empty() {
        return Err(Error::Validation("empirical divergence needs a nonempty log".into()));
    }
    let mut cache: BTreeMap<QueryId, f64> = BTreeMap::new();
    let mut acc = 0.0;
    for e in &log.entries {
        let value = match cache.get(&e.query_id) {
            Some(&v) => v,
            None => {
                let prof = profile(target, e.query_id)?;
                let mut v = 0.0;
                for (d, &r) in prof.rho.iter().enumerate() {
                    let p0 = propensities.exposure(e.query_id, d);
                    if p0 > 0.0 {
                        // ρ̂'0 (ρ'/ρ̂'0)² with both normalized by the same Z
                        v += r * r / (p0 * prof.z);
                    } else if r > 0.0 {
                        return Err(Error::SupportViolation {
                            query: e.query_id,
                            doc: d,
                        });
                    }
                }
                cache.insert(e.query_id, v);
                v
            }
        };
        acc += value;
    }
    Ok(acc / log.n() as f64)
}

/// Action-based divergence `E_q Σ_y π(y|q)²/π0(y|q)` by enumeration, uniform over
/// `queries`. Returns `f64::INFINITY` when the target puts mass on a ranking
/// the logging side never produces.
pub fn action_divergence(
    target: &PlackettLucePolicy,
    logging: LoggingPropensity<'_>,
    queries: &[Query],
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Validation("action divergence needs at least one query".into()));
    }
    let mut acc = 0.0;
    for query in queries {
        for (ranking, p) in target.enumerate(query)? {
            let p0 = logging.prob(query, &ranking)?;
            if p0 > 0.0 {
                acc += p * p / p0;
            } else if p > 0.0 {
                return Ok(f64::INFINITY);
            }
        }
    }
    Ok(acc / queries.len() as f64)
}

/// `(Z/N) · d2`: upper bound on the exposure-IPS estimator's variance.
pub fn variance_upper_bound(divergence: f64, z: f64, n: usize) -> f64 {
    z / n as f64 * divergence
}

/// Deviation `sqrt(((1-δ)/δ) · Var)` that Cantelli's inequality guarantees
/// is exceeded with probability at most `δ`.
pub fn cantelli_risk(variance: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("confidence delta must lie in (0, 1), got {delta}")));
    }
    if variance < 0.0 {
        return Err(Error::Validation(format!("negative variance {variance}")));
    }
    Ok(((1.0 - delta) / delta * variance).sqrt())
}

/// Exposure-based risk `sqrt((Z/N)((1-δ)/δ) d2)`.
pub fn exposure_risk(divergence: f64, z: f64, n: usize, delta: f64) -> Result<f64> {
    cantelli_risk(variance_upper_bound(divergence, z, n), delta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskInputs {
    pub divergence: f64,
    pub z: f64,
    pub delta: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskReport {
    pub utility: f64,
    pub divergence: f64,
    pub risk: f64,
    pub delta: f64,
    pub z: f64,
    pub n: usize,
    pub lower_bound: f64,
}

impl RiskReport {
    pub const CSV_HEADER: &'static str = "utility,divergence,risk,delta,z,n,lower_bound";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.utility, self.divergence, self.risk, self.delta, self.z, self.n, self.lower_bound
        )
    }
}

/// High-confidence lower bound `Û(π) − Risk(δ)`.
pub fn crm_lower_bound(utility: &UtilityEstimate, inputs: RiskInputs) -> Result<RiskReport> {
    if utility.n != inputs.n {
        return Err(Error::Validation(format!(
            "utility uses {} interactions but risk inputs use {}",
            utility.n, inputs.n
        )));
    }
    if inputs.n == 0 {
        return Err(Error::Validation("risk needs at least one interaction".into()));
    }
    let risk = exposure_risk(inputs.divergence, inputs.z, inputs.n, inputs.delta)?;
    Ok(RiskReport {
        utility: utility.value,
        divergence: inputs.divergence,
        risk,
        delta: inputs.delta,
        z: inputs.z,
        n: inputs.n,
        lower_bound: utility.value - risk,
    })
}

/// Sample-variance-penalised objective `Û − λ sqrt(Var/N)`.
pub fn action_crm_objective(utility: &UtilityEstimate, sample_variance: f64, lambda: f64, n: usize) -> f64 {
    utility.value - lambda * (sample_variance / n as f64).sqrt()
}

/// Unbiased sample variance of per-interaction estimator terms.
pub fn ips_sample_variance(terms: &[f64]) -> Result<f64> {
    if terms.len() < 2 {
        return Err(Error::Validation(format!(
            "sample variance needs at least 2 terms, got {}",
            terms.len()
        )));
    }
    let m = mean(terms);
    let ss: f64 = terms.iter().map(|t| (t - m) * (t - m)).sum();
    Ok((ss / (terms.len() - 1) as f64).max(0.0))
}
