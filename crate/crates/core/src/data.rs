//! Ranking datasets: queries with candidate documents, feature vectors and
//! graded relevance labels.
//!
//! Datasets come from SVMlight-style ranking files or from a seeded synthetic
//! generator. Documents are addressed by their position inside the query, so a
//! doc id is just an index into [`Query::documents`].

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type QueryId = u64;

/// Highest relevance grade accepted anywhere in the crate.
pub const MAX_GRADE: u8 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub features: Vec<f64>,
    pub grade: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub id: QueryId,
    pub documents: Vec<Document>,
}

impl Query {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn grades(&self) -> impl Iterator<Item = u8> + '_ {
        self.documents.iter().map(|d| d.grade)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingDataset {
    pub queries: Vec<Query>,
    pub feature_dim: usize,
    pub split_tag: Option<SplitTag>,
}

impl RankingDataset {
    /// Builds a dataset after checking the structural invariants.
    pub fn new(queries: Vec<Query>, feature_dim: usize, split_tag: Option<SplitTag>) -> Result<Self> {
        let dataset = RankingDataset {
            queries,
            feature_dim,
            split_tag,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashMap::with_capacity(self.queries.len());
        for query in &self.queries {
            if query.documents.is_empty() {
                return Err(Error::Validation(format!("query {} has no documents", query.id)));
            }
            if seen.insert(query.id, ()).is_some() {
                return Err(Error::Validation(format!("duplicate query id {}", query.id)));
            }
            for (doc_id, doc) in query.documents.iter().enumerate() {
                if doc.features.len() != self.feature_dim {
                    return Err(Error::Validation(format!(
                        "query {} doc {doc_id} has {} features, expected {}",
                        query.id,
                        doc.features.len(),
                        self.feature_dim
                    )));
                }
                if doc.grade > MAX_GRADE {
                    return Err(Error::Validation(format!(
                        "query {} doc {doc_id} has grade {}",
                        query.id, doc.grade
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn num_documents(&self) -> usize {
        self.queries.iter().map(Query::len).sum()
    }

    /// Map from query id to its position in `queries`.
    pub fn index(&self) -> HashMap<QueryId, usize> {
        self.queries
            .iter()
            .enumerate()
            .map(|(i, q)| (q.id, i))
            .collect()
    }

    pub fn query(&self, id: QueryId) -> Option<&Query> {
        self.queries.iter().find(|q| q.id == id)
    }

    fn subset(&self, indices: &[usize], tag: Option<SplitTag>) -> RankingDataset {
        RankingDataset {
            queries: indices.iter().map(|&i| self.queries[i].clone()).collect(),
            feature_dim: self.feature_dim,
            split_tag: tag,
        }
    }
}

fn parse_grade(token: &str, line: usize) -> Result<u8> {
    let value: f64 = token.parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad relevance grade `{token}`"),
    })?;
    if value.fract() != 0.0 || !(0.0..=MAX_GRADE as f64).contains(&value) {
        return Err(Error::Validation(format!(
            "line {line}: relevance grade {token} outside 0..={MAX_GRADE}"
        )));
    }
    Ok(value as u8)
}

/// Parses SVMlight ranking text: `<grade> qid:<id> <idx>:<val> ... [# comment]`.
///
/// Feature indices are 1-based; indices that never appear on a line are zero.
/// Documents are grouped by qid in order of first appearance.
pub fn parse_svmlight_ranking(text: &str) -> Result<RankingDataset> {
    let mut order: Vec<QueryId> = Vec::new();
    let mut groups: HashMap<QueryId, Vec<(u8, Vec<(usize, f64)>)>> = HashMap::new();
    let mut feature_dim = 0usize;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let grade = parse_grade(tokens.next().unwrap_or_default(), line_no)?;
        let qid_token = tokens.next().ok_or_else(|| Error::Parse {
            line: line_no,
            message: "missing qid".into(),
        })?;
        let qid: QueryId = qid_token
            .strip_prefix("qid:")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("expected `qid:<integer>`, found `{qid_token}`"),
            })?;

        let mut features = Vec::new();
        for token in tokens {
            let (idx, val) = token.split_once(':').ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("expected `<index>:<value>`, found `{token}`"),
            })?;
            let idx: usize = idx.parse().ok().filter(|&v| v >= 1).ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("bad feature index `{idx}`"),
            })?;
            let val: f64 = val.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad feature value `{val}`"),
            })?;
            feature_dim = feature_dim.max(idx);
            features.push((idx, val));
        }

        groups
            .entry(qid)
            .or_insert_with(|| {
                order.push(qid);
                Vec::new()
            })
            .push((grade, features));
    }

    let queries = order
        .into_iter()
        .map(|qid| {
            let documents = groups
                .remove(&qid)
                .unwrap_or_default()
                .into_iter()
                .map(|(grade, sparse)| {
                    let mut features = vec![0.0; feature_dim];
                    for (idx, val) in sparse {
                        features[idx - 1] = val;
                    }
                    Document { features, grade }
                })
                .collect();
            Query { id: qid, documents }
        })
        .collect();

    RankingDataset::new(queries, feature_dim, None)
}

pub fn load_svmlight_ranking(path: impl AsRef<Path>) -> Result<RankingDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_svmlight_ranking(&text)
}

/// Writes the dataset back out in SVMlight form, emitting only nonzero features.
pub fn to_svmlight_string(dataset: &RankingDataset) -> String {
    let mut out = String::new();
    for query in &dataset.queries {
        for doc in &query.documents {
            let _ = write!(out, "{} qid:{}", doc.grade, query.id);
            for (i, &v) in doc.features.iter().enumerate() {
                if v != 0.0 {
                    let _ = write!(out, " {}:{}", i + 1, v);
                }
            }
            out.push('\n');
        }
    }
    out
}

pub fn save_svmlight_ranking(dataset: &RankingDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_svmlight_string(dataset)).map_err(|e| Error::io(path, e))
}

/// Maps a latent relevance score to a grade.
///
/// The latent score is `w·x + noise` with `|w| = 1`, standardized by its
/// population standard deviation and compared against four increasing
/// thresholds; the grade is the number of thresholds it exceeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelevanceRule {
    pub noise_std: f64,
    pub thresholds: [f64; 4],
}

impl Default for RelevanceRule {
    /// Standard normal quantiles at 0.45, 0.70, 0.85 and 0.95, giving grade
    /// frequencies of roughly 45/25/15/10/5 percent.
    fn default() -> Self {
        RelevanceRule {
            noise_std: 0.5,
            thresholds: [-0.125_661, 0.524_401, 1.036_433, 1.644_854],
        }
    }
}

impl RelevanceRule {
    pub fn grade(&self, standardized_latent: f64) -> u8 {
        self.thresholds
            .iter()
            .filter(|&&t| standardized_latent > t)
            .count() as u8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_queries: usize,
    pub docs_per_query: usize,
    pub feature_dim: usize,
    pub relevance_rule: RelevanceRule,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_queries: 200,
            docs_per_query: 20,
            feature_dim: 8,
            relevance_rule: RelevanceRule::default(),
            seed: 42,
        }
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<RankingDataset> {
    if spec.num_queries == 0 || spec.docs_per_query == 0 || spec.feature_dim == 0 {
        return Err(Error::Config(
            "synthetic data needs positive query, document and feature counts".into(),
        ));
    }
    let rule = &spec.relevance_rule;
    if !(rule.noise_std >= 0.0) || rule.thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config(
            "relevance rule needs nonnegative noise and sorted thresholds".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut weights: Vec<f64> = (0..spec.feature_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    if norm > 0.0 {
        weights.iter_mut().for_each(|w| *w /= norm);
    } else {
        weights[0] = 1.0;
    }
    let latent_std = (1.0 + rule.noise_std * rule.noise_std).sqrt();

    let queries = (0..spec.num_queries)
        .map(|qi| {
            let documents = (0..spec.docs_per_query)
                .map(|_| {
                    let features: Vec<f64> = (0..spec.feature_dim)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect();
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let latent = features.iter().zip(&weights).map(|(x, w)| x * w).sum::<f64>()
                        + rule.noise_std * noise;
                    Document {
                        features,
                        grade: rule.grade(latent / latent_std),
                    }
                })
                .collect();
            Query {
                id: qi as QueryId + 1,
                documents,
            }
        })
        .collect();

    RankingDataset::new(queries, spec.feature_dim, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: RankingDataset,
    pub validation: RankingDataset,
    pub test: RankingDataset,
}

/// Query-level train/validation/test partition, shuffled under `seed`.
pub fn split(dataset: &RankingDataset, fractions: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got ({ft}, {fv}, {fs})"
        )));
    }
    let n = dataset.len();
    if n < 3 {
        return Err(Error::Validation(format!("cannot split {n} queries three ways")));
    }
    let n_train = ((ft * n as f64).round() as usize).clamp(1, n - 2);
    let n_val = ((fv * n as f64).round() as usize).clamp(1, n - n_train - 1);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, rest) = order.split_at(n_train);
    let (validation, test) = rest.split_at(n_val);

    Ok(Splits {
        train: dataset.subset(train, Some(SplitTag::Train)),
        validation: dataset.subset(validation, Some(SplitTag::Validation)),
        test: dataset.subset(test, Some(SplitTag::Test)),
    })
}

/// Seeded subset holding `ceil(fraction * |queries|)` queries (at least one),
/// used as the labelled data a logging policy is fitted on.
pub fn sample_queries(dataset: &RankingDataset, fraction: f64, seed: u64) -> Result<RankingDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("query fraction must lie in (0, 1], got {fraction}")));
    }
    if dataset.is_empty() {
        return Err(Error::Validation("cannot sample from an empty dataset".into()));
    }
    let k = ((fraction * dataset.len() as f64).ceil() as usize).clamp(1, dataset.len());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(k);
    order.sort_unstable();
    Ok(dataset.subset(&order, dataset.split_tag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_two_line_file() {
        let ds = parse_svmlight_ranking("2 qid:1 1:0.5\n0 qid:1 2:1.0\n").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.feature_dim, 2);
        let q = &ds.queries[0];
        assert_eq!(q.grades().collect::<Vec<_>>(), vec![2, 0]);
        assert_eq!(q.documents[0].features, vec![0.5, 0.0]);
        assert_eq!(q.documents[1].features, vec![0.0, 1.0]);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let ds = parse_svmlight_ranking("").unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.feature_dim, 0);
    }

    #[test]
    fn grade_out_of_range_is_validation_error() {
        let err = parse_svmlight_ranking("7 qid:1 1:0.5\n").unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_svmlight_ranking("1 qid:1 1:0.5\n1 qid:1 oops\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
        let err = parse_svmlight_ranking("1 q:1 1:0.5\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn comments_and_interleaved_qids() {
        let text = "1 qid:5 1:1 # a\n0 qid:3 2:2\n3 qid:5 3:3\n";
        let ds = parse_svmlight_ranking(text).unwrap();
        assert_eq!(ds.queries.iter().map(|q| q.id).collect::<Vec<_>>(), vec![5, 3]);
        assert_eq!(ds.queries[0].len(), 2);
        assert_eq!(ds.feature_dim, 3);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::default();
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 43, ..spec.clone() };
        assert_ne!(generate_synthetic(&spec).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn synthetic_minimal() {
        let spec = SyntheticSpec {
            num_queries: 1,
            docs_per_query: 1,
            feature_dim: 1,
            seed: 0,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.queries[0].len(), 1);
    }

    #[test]
    fn synthetic_default_rule_covers_all_grades() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let mut hist = [0usize; 5];
        for q in &ds.queries {
            for g in q.grades() {
                hist[g as usize] += 1;
            }
        }
        assert_eq!(hist.iter().sum::<usize>(), 4000);
        assert!(hist.iter().all(|&c| c > 0), "{hist:?}");
    }

    #[test]
    fn synthetic_rejects_zero_sizes() {
        let spec = SyntheticSpec { docs_per_query: 0, ..Default::default() };
        assert!(generate_synthetic(&spec).is_err());
    }

    fn tiny(n: usize) -> RankingDataset {
        generate_synthetic(&SyntheticSpec {
            num_queries: n,
            docs_per_query: 2,
            feature_dim: 2,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn split_sizes() {
        let s = split(&tiny(10), (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
        let third = 1.0 / 3.0;
        let s = split(&tiny(3), (third, third, third), 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (1, 1, 1));
        assert_eq!(s.test.split_tag, Some(SplitTag::Test));
    }

    #[test]
    fn split_errors() {
        assert!(split(&tiny(2), (0.5, 0.25, 0.25), 0).is_err());
        assert!(split(&tiny(10), (0.5, 0.5, 0.5), 0).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        let ds = tiny(50);
        assert_eq!(split(&ds, (0.6, 0.2, 0.2), 7).unwrap(), split(&ds, (0.6, 0.2, 0.2), 7).unwrap());
    }

    #[test]
    fn sample_queries_fraction() {
        let ds = tiny(120);
        let sub = sample_queries(&ds, 0.03, 5).unwrap();
        assert_eq!(sub.len(), 4);
        assert_eq!(sample_queries(&tiny(3), 0.03, 5).unwrap().len(), 1);
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 3usize..60, seed in any::<u64>()) {
            let ds = tiny(n);
            let s = split(&ds, (0.6, 0.2, 0.2), seed).unwrap();
            let mut ids: Vec<QueryId> = s.train.queries.iter()
                .chain(&s.validation.queries)
                .chain(&s.test.queries)
                .map(|q| q.id)
                .collect();
            ids.sort_unstable();
            let mut expected: Vec<QueryId> = ds.queries.iter().map(|q| q.id).collect();
            expected.sort_unstable();
            prop_assert_eq!(ids, expected);
        }

        #[test]
        fn svmlight_round_trip(
            grades in proptest::collection::vec(0u8..=4, 1..12),
            vals in proptest::collection::vec(prop_oneof![Just(0.0), -10.0f64..10.0], 36),
        ) {
            let docs: Vec<Document> = grades.iter().enumerate().map(|(i, &g)| Document {
                features: vals[(i * 3) % 33..(i * 3) % 33 + 3].to_vec(),
                grade: g,
            }).collect();
            let half = docs.len() / 2;
            let mut queries = vec![Query { id: 11, documents: docs[..half.max(1)].to_vec() }];
            if docs.len() > 1 {
                queries.push(Query { id: 4, documents: docs[half.max(1)..].to_vec() });
            }
            let ds = RankingDataset::new(queries, 3, None).unwrap();
            let back = parse_svmlight_ranking(&to_svmlight_string(&ds)).unwrap();
            prop_assert_eq!(back.queries.len(), ds.queries.len());
            for (a, b) in ds.queries.iter().zip(&back.queries) {
                prop_assert_eq!(a.id, b.id);
                prop_assert_eq!(a.grades().collect::<Vec<_>>(), b.grades().collect::<Vec<_>>());
                for (da, db) in a.documents.iter().zip(&b.documents) {
                    // trailing all-zero columns may shrink feature_dim; nonzeros must survive
                    for (i, &v) in da.features.iter().enumerate() {
                        prop_assert_eq!(db.features.get(i).copied().unwrap_or(0.0), v);
                    }
                }
            }
        }
    }
}
