//! Frequency estimates of logging-policy exposure and action propensities.
//!
//! The logging policy itself is not available to the learner, so both kinds
//! of propensity are recovered from the log: a document's exposure is the
//! average examination probability of the ranks it was shown at, and a
//! ranking's probability is the product of per-rank placement frequencies.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::click::ClickLog;
use crate::data::{QueryId, RankingDataset, SplitTag};
use crate::error::{Error, Result};
use crate::policy::ExposureModel;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryPropensity {
    /// Number of logged interactions for the query.
    pub count: usize,
    /// Unclipped exposure estimate per displayed document.
    pub exposure: BTreeMap<usize, f64>,
    /// `rank_counts[k][d]`: how often doc `d` was shown at 0-based rank `k`.
    pub rank_counts: Vec<BTreeMap<usize, usize>>,
}

/// Which ranks enter the factored action-propensity product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionProduct {
    /// Every displayed rank.
    #[default]
    AllRanks,
    /// Ranks `1..K-1`, leaving out the final displayed position.
    ExcludeLast,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PropensityEstimates {
    pub queries: BTreeMap<QueryId, QueryPropensity>,
    /// Lower bound applied on lookup; zero until [`clip`](Self::clip) runs on a training log.
    pub clip_floor: f64,
}

pub fn estimate_exposure_propensities(log: &ClickLog, model: &ExposureModel) -> Result<PropensityEstimates> {
    if log.is_empty() {
        return Err(Error::Validation("cannot estimate propensities from an empty log".into()));
    }
    let mut queries: BTreeMap<QueryId, QueryPropensity> = BTreeMap::new();
    for entry in &log.entries {
        let q = queries.entry(entry.query_id).or_default();
        q.count += 1;
        if q.rank_counts.len() < entry.ranking.len() {
            q.rank_counts.resize_with(entry.ranking.len(), BTreeMap::new);
        }
        for (k, &d) in entry.ranking.iter().enumerate() {
            *q.exposure.entry(d).or_insert(0.0) += model.at_rank(k + 1);
            *q.rank_counts[k].entry(d).or_insert(0) += 1;
        }
    }
    for q in queries.values_mut() {
        let inv = 1.0 / q.count as f64;
        q.exposure.values_mut().for_each(|v| *v *= inv);
    }
    Ok(PropensityEstimates {
        queries,
        clip_floor: 0.0,
    })
}

/// Clipping floor `min(1, 10/sqrt(n))` for a training log of size `n`.
pub fn clip_floor(n: usize) -> f64 {
    (10.0 / (n.max(1) as f64).sqrt()).min(1.0)
}

impl PropensityEstimates {
    /// Estimated exposure of `doc` under the logging policy, after clipping.
    pub fn exposure(&self, query: QueryId, doc: usize) -> f64 {
        let raw = self
            .queries
            .get(&query)
            .and_then(|q| q.exposure.get(&doc))
            .copied()
            .unwrap_or(0.0);
        raw.max(self.clip_floor)
    }

    pub fn count(&self, query: QueryId) -> usize {
        self.queries.get(&query).map_or(0, |q| q.count)
    }

    pub fn total_count(&self) -> usize {
        self.queries.values().map(|q| q.count).sum()
    }

    /// Empirical frequency of `doc` at 0-based `rank` for `query`.
    pub fn rank_frequency(&self, query: QueryId, rank: usize, doc: usize) -> f64 {
        self.queries.get(&query).map_or(0.0, |q| {
            q.rank_counts
                .get(rank)
                .and_then(|c| c.get(&doc))
                .map_or(0.0, |&c| c as f64 / q.count as f64)
        })
    }

    pub fn estimate_action_propensity(
        &self,
        query: QueryId,
        ranking: &[usize],
        product: ActionProduct,
    ) -> Result<f64> {
        if !self.queries.contains_key(&query) {
            return Err(Error::UnseenQuery(query));
        }
        let ranks = match product {
            ActionProduct::AllRanks => ranking.len(),
            ActionProduct::ExcludeLast => ranking.len().saturating_sub(1),
        };
        Ok(ranking
            .iter()
            .take(ranks)
            .enumerate()
            .map(|(k, &d)| self.rank_frequency(query, k, d))
            .product())
    }

    /// Training split floors exposure at `min(1, 10/sqrt(n))`; other splits are untouched.
    pub fn clip(&self, n: usize, split: SplitTag) -> PropensityEstimates {
        let mut out = self.clone();
        if split == SplitTag::Train {
            out.clip_floor = out.clip_floor.max(clip_floor(n));
        }
        out
    }

    /// Training-side estimates as seen by the divergence and the risk term.
    /// `floor` replaces the clip floor when it is lower; `None` keeps the
    /// clipped estimates the utility uses.
    pub fn for_divergence(&self, n: usize, floor: Option<f64>) -> PropensityEstimates {
        let clipped = self.clip(n, SplitTag::Train);
        match floor {
            Some(f) if f < clipped.clip_floor => PropensityEstimates {
                clip_floor: f.max(self.clip_floor),
                ..self.clone()
            },
            _ => clipped,
        }
    }

    /// Exposure estimates laid out like `dataset.queries[i].documents`.
    pub fn dense_exposure(&self, dataset: &RankingDataset) -> Vec<Vec<f64>> {
        dataset
            .queries
            .iter()
            .map(|q| (0..q.len()).map(|d| self.exposure(q.id, d)).collect())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# cltr propensities v1\n");
        let _ = writeln!(out, "clip_floor\t{}", self.clip_floor);
        for (qid, q) in &self.queries {
            let _ = writeln!(out, "count\t{qid}\t{}", q.count);
            for (d, v) in &q.exposure {
                let _ = writeln!(out, "exposure\t{qid}\t{d}\t{v}");
            }
            for (k, counts) in q.rank_counts.iter().enumerate() {
                for (d, c) in counts {
                    let _ = writeln!(out, "rank\t{qid}\t{k}\t{d}\t{c}");
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut est = PropensityEstimates::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = raw.split('\t').collect();
            let bad = || Error::Parse {
                line,
                message: format!("bad propensity record `{raw}`"),
            };
            fn p<T: std::str::FromStr>(s: &str, bad: impl Fn() -> Error) -> Result<T> {
                s.parse().map_err(|_| bad())
            }
            match (f[0], f.len()) {
                ("clip_floor", 2) => est.clip_floor = p(f[1], bad)?,
                ("count", 3) => est.queries.entry(p(f[1], bad)?).or_default().count = p(f[2], bad)?,
                ("exposure", 4) => {
                    let q = est.queries.entry(p(f[1], bad)?).or_default();
                    q.exposure.insert(p(f[2], bad)?, p(f[3], bad)?);
                }
                ("rank", 5) => {
                    let q = est.queries.entry(p(f[1], bad)?).or_default();
                    let k: usize = p(f[2], bad)?;
                    if q.rank_counts.len() <= k {
                        q.rank_counts.resize_with(k + 1, BTreeMap::new);
                    }
                    q.rank_counts[k].insert(p(f[3], bad)?, p(f[4], bad)?);
                }
                _ => return Err(bad()),
            }
        }
        Ok(est)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::click::LogEntry;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn entry(q: QueryId, ranking: &[usize]) -> LogEntry {
        LogEntry {
            query_id: q,
            ranking: ranking.to_vec(),
            clicks: vec![false; ranking.len()],
        }
    }

    fn two_rank_model() -> ExposureModel {
        ExposureModel::new(vec![1.0, 0.25]).unwrap()
    }

    #[test]
    fn exposure_is_average_examination() {
        let log = ClickLog::new(vec![entry(1, &[7, 3]), entry(1, &[3, 7])], 2).unwrap();
        let est = estimate_exposure_propensities(&log, &two_rank_model()).unwrap();
        assert_abs_diff_eq!(est.exposure(1, 7), 0.625, epsilon = 1e-15);
        assert_abs_diff_eq!(est.exposure(1, 3), 0.625, epsilon = 1e-15);
    }

    #[test]
    fn single_impression_at_top() {
        let log = ClickLog::new(vec![entry(2, &[4, 1])], 2).unwrap();
        let est = estimate_exposure_propensities(&log, &two_rank_model()).unwrap();
        assert_eq!(est.exposure(2, 4), 1.0);
        assert_eq!(est.exposure(2, 0), 0.0);
    }

    #[test]
    fn empty_log_rejected() {
        assert!(estimate_exposure_propensities(&ClickLog::default(), &two_rank_model()).is_err());
    }

    #[test]
    fn action_propensities() {
        let log = ClickLog::new(vec![entry(1, &[0, 1, 2])], 3).unwrap();
        let est = estimate_exposure_propensities(&log, &ExposureModel::top5()).unwrap();
        assert_eq!(est.estimate_action_propensity(1, &[0, 1, 2], ActionProduct::AllRanks).unwrap(), 1.0);

        let log = ClickLog::new(vec![entry(1, &[0]), entry(1, &[1])], 1).unwrap();
        let est = estimate_exposure_propensities(&log, &ExposureModel::top5()).unwrap();
        assert_eq!(est.estimate_action_propensity(1, &[0], ActionProduct::AllRanks).unwrap(), 0.5);
        assert_eq!(est.estimate_action_propensity(1, &[1], ActionProduct::AllRanks).unwrap(), 0.5);
        assert_eq!(est.estimate_action_propensity(1, &[2], ActionProduct::AllRanks).unwrap(), 0.0);
        assert!(matches!(
            est.estimate_action_propensity(8, &[0], ActionProduct::AllRanks),
            Err(Error::UnseenQuery(8))
        ));
    }

    #[test]
    fn exclude_last_drops_final_rank() {
        let log = ClickLog::new(vec![entry(1, &[0, 1]), entry(1, &[0, 2])], 2).unwrap();
        let est = estimate_exposure_propensities(&log, &ExposureModel::top5()).unwrap();
        assert_eq!(est.estimate_action_propensity(1, &[0, 1], ActionProduct::AllRanks).unwrap(), 0.5);
        assert_eq!(est.estimate_action_propensity(1, &[0, 1], ActionProduct::ExcludeLast).unwrap(), 1.0);
    }

    #[test]
    fn clipping_rule() {
        let mut est = PropensityEstimates::default();
        let mut q = QueryPropensity { count: 1, ..Default::default() };
        q.exposure.insert(0, 0.01);
        q.exposure.insert(1, 0.5);
        est.queries.insert(1, q);
        let train = est.clip(10_000, SplitTag::Train);
        assert_abs_diff_eq!(train.exposure(1, 0), 0.1, epsilon = 1e-15);
        assert_eq!(train.exposure(1, 1), 0.5);
        assert_abs_diff_eq!(train.exposure(1, 5), 0.1, epsilon = 1e-15);
        let val = est.clip(10_000, SplitTag::Validation);
        assert_eq!(val.exposure(1, 0), 0.01);
        assert_eq!(val.exposure(1, 5), 0.0);
        // small logs floor at one
        assert_eq!(est.clip(50, SplitTag::Train).exposure(1, 0), 1.0);
    }

    #[test]
    fn rank_frequencies_sum_to_one() {
        let log = ClickLog::new(
            vec![entry(1, &[0, 1]), entry(1, &[1, 2]), entry(1, &[2, 0]), entry(2, &[0, 1])],
            2,
        )
        .unwrap();
        let est = estimate_exposure_propensities(&log, &ExposureModel::top5()).unwrap();
        for (&qid, q) in &est.queries {
            for k in 0..q.rank_counts.len() {
                let s: f64 = (0..3).map(|d| est.rank_frequency(qid, k, d)).sum();
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn text_round_trip() {
        let log = ClickLog::new(vec![entry(1, &[0, 1]), entry(3, &[1, 2]), entry(1, &[2, 0])], 2).unwrap();
        let est = estimate_exposure_propensities(&log, &ExposureModel::top5())
            .unwrap()
            .clip(400, SplitTag::Train);
        let back = PropensityEstimates::from_text(&est.to_text()).unwrap();
        assert_eq!(back, est);
        assert!(PropensityEstimates::from_text("mystery\t1\n").is_err());
    }

    proptest! {
        #[test]
        fn clipping_is_monotone_and_idempotent(v in 0.0f64..=1.0, n in 1usize..1_000_000) {
            let mut est = PropensityEstimates::default();
            let mut q = QueryPropensity { count: 1, ..Default::default() };
            q.exposure.insert(0, v);
            est.queries.insert(1, q);
            let once = est.clip(n, SplitTag::Train);
            prop_assert!(once.exposure(1, 0) >= v);
            prop_assert!(once.exposure(1, 0) <= 1.0);
            prop_assert_eq!(once.clip(n, SplitTag::Train), once.clone());
        }
    }
}
