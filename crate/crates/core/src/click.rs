//! Position-based click simulation.
//!
//! A click on the document at rank `k` happens when the user examines rank `k`
//! and finds the document relevant; both events are independent Bernoulli
//! draws, so `P(click) = P(E=1 | k) · P(R=1 | grade)`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{QueryId, RankingDataset, MAX_GRADE};
use crate::error::{Error, Result};
use crate::policy::{sample_from_logits, ExposureModel, PlackettLucePolicy};

/// Affine map from relevance grade to relevance probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelevanceMapping {
    pub slope: f64,
    pub offset: f64,
}

impl Default for RelevanceMapping {
    /// `0.025 · grade + 0.2`, where the offset acts as click noise.
    fn default() -> Self {
        RelevanceMapping {
            slope: 0.025,
            offset: 0.2,
        }
    }
}

impl RelevanceMapping {
    pub fn new(slope: f64, offset: f64) -> Result<Self> {
        let top = slope * MAX_GRADE as f64 + offset;
        if !(0.0..=1.0).contains(&offset) || !(0.0..=1.0).contains(&top) {
            return Err(Error::Config(format!(
                "relevance mapping leaves [0, 1]: slope {slope}, offset {offset}"
            )));
        }
        Ok(RelevanceMapping { slope, offset })
    }

    pub fn relevance_probability(&self, grade: u8) -> Result<f64> {
        if grade > MAX_GRADE {
            return Err(Error::Validation(format!("grade {grade} outside 0..={MAX_GRADE}")));
        }
        Ok(self.prob(grade))
    }

    /// Unchecked variant for grades already validated by the dataset.
    pub(crate) fn prob(&self, grade: u8) -> f64 {
        self.slope * grade as f64 + self.offset
    }
}

/// `P(E=1 | rank) · P(R=1)`; zero for ranks past the examination model.
pub fn click_probability(model: &ExposureModel, rank: usize, rel_prob: f64) -> f64 {
    model.at_rank(rank) * rel_prob
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub query_id: QueryId,
    pub ranking: Vec<usize>,
    pub clicks: Vec<bool>,
}

impl LogEntry {
    pub fn clicked_docs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.ranking
            .iter()
            .zip(&self.clicks)
            .enumerate()
            .filter(|(_, (_, &c))| c)
            .map(|(k, (&d, _))| (k, d))
    }

    pub fn num_clicks(&self) -> usize {
        self.clicks.iter().filter(|&&c| c).count()
    }
}

/// Logged interactions: query, displayed ranking and aligned click vector.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClickLog {
    pub entries: Vec<LogEntry>,
    /// Ranking cutoff the log was generated with.
    pub k: usize,
}

impl ClickLog {
    pub fn new(entries: Vec<LogEntry>, k: usize) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if e.ranking.len() != e.clicks.len() {
                return Err(Error::Validation(format!(
                    "entry {i}: ranking has {} docs but {} click flags",
                    e.ranking.len(),
                    e.clicks.len()
                )));
            }
        }
        Ok(ClickLog { entries, k })
    }

    pub fn n(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_clicks(&self) -> usize {
        self.entries.iter().map(LogEntry::num_clicks).sum()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# cltr click log v1\n");
        let _ = writeln!(out, "n {}", self.n());
        let _ = writeln!(out, "k {}", self.k);
        for e in &self.entries {
            let docs: Vec<String> = e.ranking.iter().map(|d| d.to_string()).collect();
            let clicks: Vec<&str> = e.clicks.iter().map(|&c| if c { "1" } else { "0" }).collect();
            let _ = writeln!(out, "{}\t{}\t{}", e.query_id, docs.join(","), clicks.join(","));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut n = None;
        let mut k = None;
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let bad = |message: String| Error::Parse { line, message };
            if let Some(v) = raw.strip_prefix("n ") {
                n = Some(v.trim().parse::<usize>().map_err(|_| bad(format!("bad count `{v}`")))?);
                continue;
            }
            if let Some(v) = raw.strip_prefix("k ") {
                k = Some(v.trim().parse::<usize>().map_err(|_| bad(format!("bad cutoff `{v}`")))?);
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad(format!("expected 3 tab-separated fields, got {}", fields.len())));
            }
            let query_id = fields[0]
                .parse()
                .map_err(|_| bad(format!("bad qid `{}`", fields[0])))?;
            let ranking = fields[1]
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<usize>().map_err(|_| bad(format!("bad doc `{s}`"))))
                .collect::<Result<Vec<_>>>()?;
            let clicks = fields[2]
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| match s {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(bad(format!("bad click flag `{other}`"))),
                })
                .collect::<Result<Vec<_>>>()?;
            if ranking.len() != clicks.len() {
                return Err(bad("ranking and click vector differ in length".into()));
            }
            entries.push(LogEntry {
                query_id,
                ranking,
                clicks,
            });
        }
        let n = n.ok_or(Error::Parse {
            line: 0,
            message: "missing `n` header".into(),
        })?;
        if n != entries.len() {
            return Err(Error::Validation(format!(
                "header declares {n} entries, found {}",
                entries.len()
            )));
        }
        let k = k.ok_or(Error::Parse {
            line: 0,
            message: "missing `k` header".into(),
        })?;
        ClickLog::new(entries, k)
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

/// Simulates `n` interactions: a uniformly drawn query, a ranking sampled
/// from the logging policy and independent clicks per displayed rank.
pub fn simulate_log<R: Rng + ?Sized>(
    logging_policy: &PlackettLucePolicy,
    dataset: &RankingDataset,
    model: &ExposureModel,
    mapping: &RelevanceMapping,
    n: usize,
    rng: &mut R,
) -> Result<ClickLog> {
    if n == 0 {
        return Ok(ClickLog {
            entries: Vec::new(),
            k: logging_policy.truncation_k,
        });
    }
    if dataset.is_empty() {
        return Err(Error::Validation("cannot simulate clicks on an empty dataset".into()));
    }
    let logits: Vec<Vec<f64>> = dataset.queries.iter().map(|q| logging_policy.logits(q)).collect();
    let rel: Vec<Vec<f64>> = dataset
        .queries
        .iter()
        .map(|q| q.grades().map(|g| mapping.prob(g)).collect())
        .collect();

    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let qi = rng.gen_range(0..dataset.len());
        let query = &dataset.queries[qi];
        let ranking = sample_from_logits(&logits[qi], logging_policy.ranking_len(query.len()), rng);
        let clicks = ranking
            .iter()
            .enumerate()
            .map(|(k, &d)| rng.gen::<f64>() < click_probability(model, k + 1, rel[qi][d]))
            .collect();
        entries.push(LogEntry {
            query_id: query.id,
            ranking,
            clicks,
        });
    }
    Ok(ClickLog {
        entries,
        k: logging_policy.truncation_k,
    })
}
