//! Plackett–Luce ranking policies over feature-based scorers.
//!
//! A policy turns the scores of a query's documents into a distribution over
//! truncated rankings by sampling without replacement from a softmax over the
//! documents that are still unplaced. Expected exposure under a rank-based
//! examination model is available exactly (prefix enumeration, small queries)
//! or by Monte Carlo.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Query;
use crate::error::{Error, Result};

/// Largest query size for which exact prefix enumeration is offered.
pub const EXACT_ENUMERATION_CAP: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Linear,
    Mlp,
}

/// Feature-based document scorer with a flat parameter vector.
///
/// `Linear` is `θ·x` (no bias, it cancels in the softmax). `Mlp` stacks
/// `tanh` hidden layers, each stored as a row-major weight matrix followed by
/// its bias, and ends in a single linear output unit with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    kind: ScorerKind,
    input_dim: usize,
    hidden: Vec<usize>,
    params: Vec<f64>,
}

impl Scorer {
    pub fn linear(input_dim: usize) -> Self {
        Scorer {
            kind: ScorerKind::Linear,
            input_dim,
            hidden: Vec::new(),
            params: vec![0.0; input_dim],
        }
    }

    pub fn linear_with(params: Vec<f64>) -> Self {
        Scorer {
            kind: ScorerKind::Linear,
            input_dim: params.len(),
            hidden: Vec::new(),
            params,
        }
    }

    pub fn mlp(input_dim: usize, hidden: &[usize]) -> Self {
        let mut scorer = Scorer {
            kind: ScorerKind::Mlp,
            input_dim,
            hidden: hidden.to_vec(),
            params: Vec::new(),
        };
        scorer.params = vec![0.0; scorer.expected_param_count()];
        scorer
    }

    fn expected_param_count(&self) -> usize {
        match self.kind {
            ScorerKind::Linear => self.input_dim,
            ScorerKind::Mlp => {
                let mut fan_in = self.input_dim;
                let mut count = 0;
                for &width in &self.hidden {
                    count += width * fan_in + width;
                    fan_in = width;
                }
                count + fan_in + 1
            }
        }
    }

    pub fn kind(&self) -> ScorerKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Small zero-mean initialization. Hidden weights get `1/sqrt(fan_in)`
    /// scale so units are not symmetric; the output layer gets `output_scale`,
    /// which keeps the initial policy close to uniform.
    pub fn init_random<R: Rng + ?Sized>(&mut self, rng: &mut R, output_scale: f64) {
        let mut offset = 0;
        let mut fan_in = self.input_dim;
        if self.kind == ScorerKind::Mlp {
            for &width in &self.hidden {
                let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("finite std");
                for p in &mut self.params[offset..offset + width * fan_in] {
                    *p = normal.sample(rng);
                }
                offset += width * fan_in;
                self.params[offset..offset + width].iter_mut().for_each(|b| *b = 0.0);
                offset += width;
                fan_in = width;
            }
        }
        let normal = Normal::new(0.0, output_scale).expect("finite std");
        for p in &mut self.params[offset..offset + fan_in] {
            *p = normal.sample(rng);
        }
        if self.kind == ScorerKind::Mlp {
            self.params[offset + fan_in] = 0.0;
        }
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.input_dim);
        match self.kind {
            ScorerKind::Linear => dot(&self.params, x),
            ScorerKind::Mlp => {
                let mut act = x.to_vec();
                let mut offset = 0;
                for &width in &self.hidden {
                    act = self.dense_tanh(&act, width, &mut offset);
                }
                let out = dot(&self.params[offset..offset + act.len()], &act);
                out + self.params[offset + act.len()]
            }
        }
    }

    fn dense_tanh(&self, input: &[f64], width: usize, offset: &mut usize) -> Vec<f64> {
        let fan_in = input.len();
        let w = &self.params[*offset..*offset + width * fan_in];
        let b = &self.params[*offset + width * fan_in..*offset + width * fan_in + width];
        *offset += width * fan_in + width;
        (0..width)
            .map(|j| (dot(&w[j * fan_in..(j + 1) * fan_in], input) + b[j]).tanh())
            .collect()
    }

    pub fn scores(&self, query: &Query) -> Vec<f64> {
        query.documents.iter().map(|d| self.score(&d.features)).collect()
    }

    /// Accumulates `Σ_d grad_scores[d] · ∂score(x_d)/∂θ` into `grad_params`.
    pub fn backprop(&self, query: &Query, grad_scores: &[f64], grad_params: &mut [f64]) {
        debug_assert_eq!(grad_params.len(), self.params.len());
        for (doc, &g) in query.documents.iter().zip(grad_scores) {
            if g == 0.0 {
                continue;
            }
            self.backprop_one(&doc.features, g, grad_params);
        }
    }

    fn backprop_one(&self, x: &[f64], g: f64, grad: &mut [f64]) {
        match self.kind {
            ScorerKind::Linear => {
                for (gp, &xi) in grad.iter_mut().zip(x) {
                    *gp += g * xi;
                }
            }
            ScorerKind::Mlp => {
                // forward pass keeping every layer's activations
                let mut acts: Vec<Vec<f64>> = vec![x.to_vec()];
                let mut offsets = Vec::with_capacity(self.hidden.len());
                let mut offset = 0;
                for &width in &self.hidden {
                    offsets.push(offset);
                    let next = self.dense_tanh(acts.last().expect("input layer"), width, &mut offset);
                    acts.push(next);
                }
                let last = acts.last().expect("input layer");
                let out_w = offset;
                // output layer
                let mut delta: Vec<f64> = Vec::with_capacity(last.len());
                for (i, &a) in last.iter().enumerate() {
                    grad[out_w + i] += g * a;
                    delta.push(g * self.params[out_w + i]);
                }
                grad[out_w + last.len()] += g;
                // hidden layers, last to first
                for layer in (0..self.hidden.len()).rev() {
                    let width = self.hidden[layer];
                    let input = &acts[layer];
                    let output = &acts[layer + 1];
                    let fan_in = input.len();
                    let off = offsets[layer];
                    let mut prev = vec![0.0; fan_in];
                    for j in 0..width {
                        let dz = delta[j] * (1.0 - output[j] * output[j]);
                        if dz == 0.0 {
                            continue;
                        }
                        let row = off + j * fan_in;
                        for i in 0..fan_in {
                            grad[row + i] += dz * input[i];
                            prev[i] += dz * self.params[row + i];
                        }
                        grad[off + width * fan_in + j] += dz;
                    }
                    delta = prev;
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rank-based examination probabilities; `probs[k]` is `P(E=1 | rank k+1)`
/// and every rank past the end has probability zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureModel {
    probs: Vec<f64>,
}

impl ExposureModel {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!(
                "examination probabilities must lie in [0, 1]: {probs:?}"
            )));
        }
        Ok(ExposureModel { probs })
    }

    /// `(1/rank)^power` for ranks `1..=k`, zero below.
    pub fn inverse_power(k: usize, power: f64) -> Self {
        ExposureModel {
            probs: (1..=k).map(|r| (1.0 / r as f64).powf(power)).collect(),
        }
    }

    /// Top-5 setup with `(1/rank)^2` examination.
    pub fn top5() -> Self {
        Self::inverse_power(5, 2.0)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Examination probability at a 1-based rank.
    pub fn at_rank(&self, rank: usize) -> f64 {
        if rank == 0 {
            return 0.0;
        }
        self.probs.get(rank - 1).copied().unwrap_or(0.0)
    }

    /// Total examination of a ranking of length `len`.
    pub fn total(&self, len: usize) -> f64 {
        self.probs.iter().take(len).sum()
    }
}

impl Default for ExposureModel {
    fn default() -> Self {
        Self::top5()
    }
}

/// Expected exposure of each document of one query, with its normalized form.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureProfile {
    pub rho: Vec<f64>,
    pub z: f64,
    pub normalized: Vec<f64>,
}

impl ExposureProfile {
    pub fn new(rho: Vec<f64>, z: f64) -> Self {
        let normalized = if z > 0.0 {
            rho.iter().map(|r| r / z).collect()
        } else {
            vec![0.0; rho.len()]
        };
        ExposureProfile { rho, z, normalized }
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExposureMode {
    Exact,
    MonteCarlo { samples: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlackettLucePolicy {
    pub scorer: Scorer,
    pub truncation_k: usize,
    pub temperature: f64,
}

impl PlackettLucePolicy {
    pub fn new(scorer: Scorer, truncation_k: usize, temperature: f64) -> Result<Self> {
        if truncation_k == 0 || !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!(
                "policy needs K >= 1 and a positive temperature, got K={truncation_k} T={temperature}"
            )));
        }
        Ok(PlackettLucePolicy {
            scorer,
            truncation_k,
            temperature,
        })
    }

    pub fn ranking_len(&self, num_docs: usize) -> usize {
        self.truncation_k.min(num_docs)
    }

    /// Scores divided by the temperature: the softmax inputs.
    pub fn logits(&self, query: &Query) -> Vec<f64> {
        let inv_t = 1.0 / self.temperature;
        query
            .documents
            .iter()
            .map(|d| self.scorer.score(&d.features) * inv_t)
            .collect()
    }

    pub fn sample_ranking<R: Rng + ?Sized>(&self, query: &Query, rng: &mut R) -> Vec<usize> {
        let logits = self.logits(query);
        sample_from_logits(&logits, self.ranking_len(query.len()), rng)
    }

    pub fn log_prob(&self, query: &Query, ranking: &[usize]) -> Result<f64> {
        validate_ranking(query, ranking)?;
        Ok(log_prob_from_logits(&self.logits(query), ranking))
    }

    /// Every ranking of length `min(K, |D_q|)` with its probability.
    pub fn enumerate(&self, query: &Query) -> Result<Vec<(Vec<usize>, f64)>> {
        if query.len() > EXACT_ENUMERATION_CAP {
            return Err(Error::EnumerationCap(query.id, query.len(), EXACT_ENUMERATION_CAP));
        }
        Ok(enumerate_rankings(&self.logits(query), self.ranking_len(query.len())))
    }

    pub fn exact_exposure(&self, query: &Query, model: &ExposureModel) -> Result<ExposureProfile> {
        let len = self.ranking_len(query.len());
        let mut rho = vec![0.0; query.len()];
        for (ranking, p) in self.enumerate(query)? {
            for (k, &d) in ranking.iter().enumerate() {
                rho[d] += p * model.at_rank(k + 1);
            }
        }
        Ok(ExposureProfile::new(rho, model.total(len)))
    }

    pub fn monte_carlo_exposure<R: Rng + ?Sized>(
        &self,
        query: &Query,
        model: &ExposureModel,
        samples: usize,
        rng: &mut R,
    ) -> ExposureProfile {
        let logits = self.logits(query);
        mc_exposure_from_logits(&logits, self.ranking_len(query.len()), model, samples, rng)
    }

    pub fn expected_exposure<R: Rng + ?Sized>(
        &self,
        query: &Query,
        model: &ExposureModel,
        mode: ExposureMode,
        rng: &mut R,
    ) -> Result<ExposureProfile> {
        match mode {
            ExposureMode::Exact => self.exact_exposure(query, model),
            ExposureMode::MonteCarlo { samples } => {
                Ok(self.monte_carlo_exposure(query, model, samples, rng))
            }
        }
    }

    pub fn to_checkpoint_string(&self) -> String {
        let s = &self.scorer;
        let mut out = String::from("# cltr policy checkpoint v1\n");
        let kind = match s.kind {
            ScorerKind::Linear => "linear",
            ScorerKind::Mlp => "mlp",
        };
        let hidden: Vec<String> = s.hidden.iter().map(|w| w.to_string()).collect();
        let _ = writeln!(out, "kind {kind}");
        let _ = writeln!(out, "input_dim {}", s.input_dim);
        let _ = writeln!(out, "hidden {}", hidden.join(" "));
        let _ = writeln!(out, "truncation_k {}", self.truncation_k);
        let _ = writeln!(out, "temperature {}", self.temperature);
        let _ = writeln!(out, "params {}", s.params.len());
        for p in &s.params {
            let _ = writeln!(out, "{p}");
        }
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let mut field = |name: &str| -> Result<(usize, String)> {
            let (line, content) = lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("checkpoint ends before `{name}`"),
            })?;
            let rest = content
                .strip_prefix(name)
                .filter(|r| r.is_empty() || r.starts_with(' '))
                .ok_or_else(|| Error::Parse {
                    line,
                    message: format!("expected `{name}`"),
                })?;
            Ok((line, rest.trim().to_string()))
        };
        fn num<T: std::str::FromStr>(line: usize, s: &str) -> Result<T> {
            s.parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad number `{s}`"),
            })
        }

        let (line, kind) = field("kind")?;
        let kind = match kind.as_str() {
            "linear" => ScorerKind::Linear,
            "mlp" => ScorerKind::Mlp,
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown scorer kind `{other}`"),
                })
            }
        };
        let (line, dim) = field("input_dim")?;
        let input_dim: usize = num(line, &dim)?;
        let (line, hidden) = field("hidden")?;
        let hidden = hidden
            .split_whitespace()
            .map(|w| num(line, w))
            .collect::<Result<Vec<usize>>>()?;
        let (line, k) = field("truncation_k")?;
        let truncation_k: usize = num(line, &k)?;
        let (line, t) = field("temperature")?;
        let temperature: f64 = num(line, &t)?;
        let (line, count) = field("params")?;
        let count: usize = num(line, &count)?;

        let mut scorer = match kind {
            ScorerKind::Linear => Scorer::linear(input_dim),
            ScorerKind::Mlp => Scorer::mlp(input_dim, &hidden),
        };
        if count != scorer.num_params() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} parameters, header says {count}", scorer.num_params()),
            });
        }
        for slot in scorer.params.iter_mut() {
            let (line, value) = lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                message: "checkpoint ends inside the parameter block".into(),
            })?;
            *slot = num(line, value)?;
        }
        PlackettLucePolicy::new(scorer, truncation_k, temperature)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }
}

pub(crate) fn validate_ranking(query: &Query, ranking: &[usize]) -> Result<()> {
    let mut seen = vec![false; query.len()];
    if ranking.is_empty() {
        return Err(Error::InvalidRanking {
            query: query.id,
            reason: "empty ranking".into(),
        });
    }
    for &d in ranking {
        if d >= query.len() {
            return Err(Error::InvalidRanking {
                query: query.id,
                reason: format!("document {d} is not a candidate"),
            });
        }
        if std::mem::replace(&mut seen[d], true) {
            return Err(Error::InvalidRanking {
                query: query.id,
                reason: format!("document {d} appears twice"),
            });
        }
    }
    Ok(())
}

fn shifted_weights(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    logits.iter().map(|l| (l - max).exp()).collect()
}

/// Sequential softmax sampling without replacement of `len` documents.
pub fn sample_from_logits<R: Rng + ?Sized>(logits: &[f64], len: usize, rng: &mut R) -> Vec<usize> {
    let mut weights = shifted_weights(logits);
    let mut placed = vec![false; logits.len()];
    let mut ranking = Vec::with_capacity(len);
    for _ in 0..len.min(logits.len()) {
        let total: f64 = weights.iter().sum();
        let mut chosen = None;
        if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            for (d, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    chosen = Some(d);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
        } else {
            // remaining weights underflowed: take the best unplaced logit
            chosen = (0..logits.len())
                .filter(|&d| !placed[d])
                .max_by(|&a, &b| logits[a].total_cmp(&logits[b]));
        }
        let d = chosen.expect("a document remains to be placed");
        ranking.push(d);
        placed[d] = true;
        weights[d] = 0.0;
    }
    ranking
}

/// Exact PL log-probability of a (prefix) ranking given softmax inputs.
pub fn log_prob_from_logits(logits: &[f64], ranking: &[usize]) -> f64 {
    let mut placed = vec![false; logits.len()];
    let mut total = 0.0;
    for &d in ranking {
        let max = logits
            .iter()
            .zip(&placed)
            .filter(|(_, &p)| !p)
            .map(|(&l, _)| l)
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + logits
                .iter()
                .zip(&placed)
                .filter(|(_, &p)| !p)
                .map(|(&l, _)| (l - max).exp())
                .sum::<f64>()
                .ln();
        total += logits[d] - lse;
        placed[d] = true;
    }
    total
}

/// Adds `scale · ∂ log π(ranking)/∂logits` into `grad`.
pub fn add_log_prob_grad(logits: &[f64], ranking: &[usize], scale: f64, grad: &mut [f64]) {
    let mut weights = shifted_weights(logits);
    for &d in ranking {
        let total: f64 = weights.iter().sum();
        if total > 0.0 {
            for (g, &w) in grad.iter_mut().zip(&weights) {
                *g -= scale * w / total;
            }
        }
        grad[d] += scale;
        weights[d] = 0.0;
    }
}

/// All rankings of length `len` with their PL probabilities, in lexicographic order.
pub fn enumerate_rankings(logits: &[f64], len: usize) -> Vec<(Vec<usize>, f64)> {
    fn recurse(
        logits: &[f64],
        len: usize,
        prefix: &mut Vec<usize>,
        placed: &mut [bool],
        prob: f64,
        out: &mut Vec<(Vec<usize>, f64)>,
    ) {
        if prefix.len() == len {
            out.push((prefix.clone(), prob));
            return;
        }
        let max = logits
            .iter()
            .zip(placed.iter())
            .filter(|(_, &p)| !p)
            .map(|(&l, _)| l)
            .fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits
            .iter()
            .zip(placed.iter())
            .filter(|(_, &p)| !p)
            .map(|(&l, _)| (l - max).exp())
            .sum();
        for d in 0..logits.len() {
            if placed[d] {
                continue;
            }
            let p = (logits[d] - max).exp() / total;
            placed[d] = true;
            prefix.push(d);
            recurse(logits, len, prefix, placed, prob * p, out);
            prefix.pop();
            placed[d] = false;
        }
    }
    let mut out = Vec::new();
    let mut placed = vec![false; logits.len()];
    recurse(logits, len.min(logits.len()), &mut Vec::with_capacity(len), &mut placed, 1.0, &mut out);
    out
}

pub fn mc_exposure_from_logits<R: Rng + ?Sized>(
    logits: &[f64],
    len: usize,
    model: &ExposureModel,
    samples: usize,
    rng: &mut R,
) -> ExposureProfile {
    let mut rho = vec![0.0; logits.len()];
    let samples = samples.max(1);
    for _ in 0..samples {
        for (k, d) in sample_from_logits(logits, len, rng).into_iter().enumerate() {
            rho[d] += model.at_rank(k + 1);
        }
    }
    let inv = 1.0 / samples as f64;
    rho.iter_mut().for_each(|r| *r *= inv);
    ExposureProfile::new(rho, model.total(len))
}
