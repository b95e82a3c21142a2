//! Ground-truth evaluation against relevance labels, and brute-force oracles
//! for small instances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::click::RelevanceMapping;
use crate::data::{Query, QueryId, RankingDataset};
use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::policy::{
    enumerate_rankings, log_prob_from_logits, sample_from_logits, ExposureModel, PlackettLucePolicy,
    EXACT_ENUMERATION_CAP,
};

/// Largest query the outcome enumeration in [`brute_force_estimator_moments`] accepts.
pub const BRUTE_FORCE_CAP: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gain {
    #[default]
    Linear,
    Exponential,
}

impl Gain {
    pub fn apply(self, grade: u8) -> f64 {
        match self {
            Gain::Linear => grade as f64,
            Gain::Exponential => (1u32 << grade) as f64 - 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryEval {
    pub query_id: QueryId,
    pub ndcg: f64,
    pub expected_clicks: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub ndcg_at_k: f64,
    pub true_expected_clicks: f64,
    pub per_query: Vec<QueryEval>,
}

pub fn discount(rank0: usize) -> f64 {
    1.0 / ((rank0 + 2) as f64).log2()
}

pub fn ideal_dcg(query: &Query, k: usize, gain: Gain) -> f64 {
    let mut grades: Vec<u8> = query.grades().collect();
    grades.sort_unstable_by(|a, b| b.cmp(a));
    grades.iter().take(k).enumerate().map(|(r, &g)| gain.apply(g) * discount(r)).sum()
}

fn query_rng(seed: u64, query: QueryId) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ query.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Expected DCG@k and expected clicks for one query, sharing the ranking draws.
fn evaluate_query(
    policy: &PlackettLucePolicy,
    query: &Query,
    k: usize,
    model: &ExposureModel,
    mapping: &RelevanceMapping,
    mode: EvalMode,
    gain: Gain,
) -> Result<QueryEval> {
    let logits = policy.logits(query);
    let len = policy.ranking_len(query.len());
    let rel: Vec<f64> = query.documents.iter().map(|d| mapping.prob(d.grade)).collect();
    let score = |ranking: &[usize]| -> (f64, f64) {
        let mut dcg = 0.0;
        let mut clicks = 0.0;
        for (r, &d) in ranking.iter().enumerate() {
            if r < k {
                dcg += gain.apply(query.documents[d].grade) * discount(r);
            }
            clicks += model.at_rank(r + 1) * rel[d];
        }
        (dcg, clicks)
    };
    let (dcg, clicks) = match mode {
        EvalMode::Exact => {
            if query.len() > EXACT_ENUMERATION_CAP {
                return Err(Error::EnumerationCap(query.id, query.len(), EXACT_ENUMERATION_CAP));
            }
            // exposure beyond the model's length is zero, so a prefix of
            // max(k, model length) ranks carries everything both metrics need
            let prefix = len.min(k.max(model.len()));
            enumerate_rankings(&logits, prefix).iter().fold((0.0, 0.0), |acc, (y, p)| {
                let (a, b) = score(y);
                (acc.0 + p * a, acc.1 + p * b)
            })
        }
        EvalMode::MonteCarlo { samples, seed } => {
            let samples = samples.max(1);
            let mut rng = query_rng(seed, query.id);
            let mut acc = (0.0, 0.0);
            for _ in 0..samples {
                let (a, b) = score(&sample_from_logits(&logits, len, &mut rng));
                acc.0 += a;
                acc.1 += b;
            }
            (acc.0 / samples as f64, acc.1 / samples as f64)
        }
    };
    let ideal = ideal_dcg(query, k, gain);
    let ndcg = if ideal > 0.0 { (dcg / ideal).clamp(0.0, 1.0) } else { 1.0 };
    Ok(QueryEval {
        query_id: query.id,
        ndcg,
        expected_clicks: clicks,
    })
}

/// NDCG@k and true expected clicks, averaged uniformly over the dataset's queries.
/// A query whose ideal DCG is zero scores 1.
pub fn evaluate(
    policy: &PlackettLucePolicy,
    dataset: &RankingDataset,
    k: usize,
    model: &ExposureModel,
    mapping: &RelevanceMapping,
    mode: EvalMode,
    gain: Gain,
) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::Config("NDCG cutoff must be at least 1".into()));
    }
    let per_query = dataset
        .queries
        .par_iter()
        .map(|q| evaluate_query(policy, q, k, model, mapping, mode, gain))
        .collect::<Result<Vec<_>>>()?;
    let m = per_query.len().max(1) as f64;
    Ok(EvalReport {
        ndcg_at_k: per_query.iter().map(|e| e.ndcg).sum::<f64>() / m,
        true_expected_clicks: per_query.iter().map(|e| e.expected_clicks).sum::<f64>() / m,
        per_query,
    })
}

pub fn ndcg_at_k(policy: &PlackettLucePolicy, dataset: &RankingDataset, k: usize, mode: EvalMode) -> Result<f64> {
    Ok(evaluate(
        policy,
        dataset,
        k,
        &ExposureModel::default(),
        &RelevanceMapping::default(),
        mode,
        Gain::Linear,
    )?
    .ndcg_at_k)
}

/// `E_q[Σ_d ρ(d) P(R=1|d,q)]`: the simulator's expected clicks per interaction.
pub fn true_utility(
    policy: &PlackettLucePolicy,
    dataset: &RankingDataset,
    model: &ExposureModel,
    mapping: &RelevanceMapping,
    mode: EvalMode,
) -> Result<f64> {
    Ok(evaluate(policy, dataset, 1, model, mapping, mode, Gain::Linear)?.true_expected_clicks)
}

/// Exact mean and variance of an estimator averaged over `n` interactions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorMoments {
    pub mean: f64,
    pub variance: f64,
}

/// Exact moments of an estimator for `target` on logs from `logging`, by summing
/// over every (ranking, click vector) outcome. Propensities are the true ones.
pub fn brute_force_estimator_moments(
    query: &Query,
    target: &PlackettLucePolicy,
    logging: &PlackettLucePolicy,
    model: &ExposureModel,
    mapping: &RelevanceMapping,
    kind: EstimatorKind,
    n: usize,
) -> Result<EstimatorMoments> {
    if query.len() > BRUTE_FORCE_CAP {
        return Err(Error::EnumerationCap(query.id, query.len(), BRUTE_FORCE_CAP));
    }
    if n == 0 {
        return Err(Error::Validation("estimator moments need n >= 1".into()));
    }
    let rho = target.exact_exposure(query, model)?.rho;
    let rho0 = logging.exact_exposure(query, model)?.rho;
    let rel: Vec<f64> = query.documents.iter().map(|d| mapping.prob(d.grade)).collect();
    let target_logits = target.logits(query);

    let (mut m1, mut m2) = (0.0, 0.0);
    for (ranking, p_rank) in logging.enumerate(query)? {
        let weight_action = match kind {
            EstimatorKind::ActionIps => log_prob_from_logits(&target_logits, &ranking).exp() / p_rank,
            _ => 0.0,
        };
        for pattern in 0u32..(1 << ranking.len()) {
            let mut p = p_rank;
            let mut value = 0.0;
            for (r, &d) in ranking.iter().enumerate() {
                let pc = model.at_rank(r + 1) * rel[d];
                if pattern >> r & 1 == 1 {
                    p *= pc;
                    value += match kind {
                        EstimatorKind::Naive => rho[d],
                        EstimatorKind::ExposureIps => rho[d] / rho0[d],
                        EstimatorKind::ActionIps => weight_action,
                    };
                } else {
                    p *= 1.0 - pc;
                }
            }
            if p > 0.0 {
                m1 += p * value;
                m2 += p * value * value;
            }
        }
    }
    Ok(EstimatorMoments {
        mean: m1,
        variance: (m2 - m1 * m1).max(0.0) / n as f64,
    })
}
