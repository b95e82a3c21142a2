//! Small enumerable instances shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use cltr_core::data::{Document, Query, QueryId, RankingDataset};
use cltr_core::estimators::ProfileSet;
use cltr_core::policy::{ExposureModel, PlackettLucePolicy, Scorer};
use cltr_core::propensity::{PropensityEstimates, QueryPropensity};

pub const FEATURES: usize = 2;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_query<R: Rng>(rng: &mut R, id: QueryId, docs: usize) -> Query {
    Query {
        id,
        documents: (0..docs)
            .map(|_| Document {
                features: (0..FEATURES).map(|_| rng.sample(StandardNormal)).collect(),
                grade: rng.gen_range(0..=4),
            })
            .collect(),
    }
}

pub fn random_policy<R: Rng>(rng: &mut R, k: usize, scale: f64) -> PlackettLucePolicy {
    let params = (0..FEATURES).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    PlackettLucePolicy::new(Scorer::linear_with(params), k, 1.0).unwrap()
}

pub fn dataset(queries: Vec<Query>) -> RankingDataset {
    RankingDataset::new(queries, FEATURES, None).unwrap()
}

/// One enumerable (query, target, logging) instance with at most three
/// documents and K at most three.
pub struct Instance {
    pub query: Query,
    pub target: PlackettLucePolicy,
    pub logging: PlackettLucePolicy,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let docs = r.gen_range(1..=3);
    let k = r.gen_range(1..=3);
    Instance {
        query: random_query(&mut r, seed, docs),
        target: random_policy(&mut r, k, 1.5),
        logging: random_policy(&mut r, k, 1.5),
    }
}

pub fn exact_profiles(policy: &PlackettLucePolicy, queries: &[Query], model: &ExposureModel) -> ProfileSet {
    queries
        .iter()
        .map(|q| (q.id, policy.exact_exposure(q, model).unwrap()))
        .collect()
}

/// Propensity table holding the logging policy's exact exposure.
pub fn true_propensities(logging: &PlackettLucePolicy, queries: &[Query], model: &ExposureModel) -> PropensityEstimates {
    let queries = queries
        .iter()
        .map(|q| {
            let rho = logging.exact_exposure(q, model).unwrap().rho;
            let exposure: BTreeMap<usize, f64> = rho.into_iter().enumerate().collect();
            (
                q.id,
                QueryPropensity {
                    count: 1,
                    exposure,
                    rank_counts: Vec::new(),
                },
            )
        })
        .collect();
    PropensityEstimates {
        queries,
        clip_floor: 0.0,
    }
}

/// Relevance probability `0.025 · grade + 0.2`, written out independently of
/// the library's mapping.
pub fn click_rel(grade: u8) -> f64 {
    0.025 * grade as f64 + 0.2
}

/// Exact `Σ_d ρ(d) P(R=1|d)` for one query from the enumerated ranking
/// distribution, without going through the library's exposure code.
pub fn oracle_utility(policy: &PlackettLucePolicy, query: &Query, model: &ExposureModel) -> f64 {
    policy
        .enumerate(query)
        .unwrap()
        .iter()
        .map(|(y, p)| {
            p * y
                .iter()
                .enumerate()
                .map(|(k, &d)| model.probs().get(k).copied().unwrap_or(0.0) * click_rel(query.documents[d].grade))
                .sum::<f64>()
        })
        .sum()
}
