//! Full-information training on relevance labels, used for the logging policy
//! (on a small query subset) and the skyline (on every training query).
//!
//! The reward of a ranking is its DCG@k divided by the query's ideal DCG, so
//! the objective is the policy's expected NDCG@k.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::RankingDataset;
use crate::error::{Error, Result};
use crate::eval::{discount, evaluate, ideal_dcg, EvalMode, Gain};
use crate::click::RelevanceMapping;
use crate::policy::{ExposureModel, PlackettLucePolicy};
use crate::training::{reinforce_logit_grad, stream_seed, Optimizer, OptimizerKind};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rankings_per_query_sample: usize,
    pub cutoff: usize,
    pub gain: Gain,
    /// Early stopping on validation NDCG when a validation split is given.
    pub patience: usize,
    pub validation_samples: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            learning_rate: 0.5,
            epochs: 30,
            batch_size: 16,
            rankings_per_query_sample: 32,
            cutoff: 5,
            gain: Gain::Linear,
            patience: 5,
            validation_samples: 200,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.rankings_per_query_sample == 0 || self.cutoff == 0 || self.validation_samples == 0
        {
            return Err(Error::Config(
                "batch_size, rankings_per_query_sample, cutoff and validation_samples must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SupervisedRecord {
    pub epoch: usize,
    pub validation_ndcg: Option<f64>,
}

/// Maximizes expected NDCG@cutoff with REINFORCE. With a validation split the
/// best-scoring epoch is returned; without one, the final parameters.
pub fn train_supervised(
    config: &SupervisedConfig,
    initial: PlackettLucePolicy,
    train: &RankingDataset,
    validation: Option<&RankingDataset>,
) -> Result<(PlackettLucePolicy, Vec<SupervisedRecord>)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("supervised training needs at least one query".into()));
    }
    let positions: Vec<f64> = (0..config.cutoff).map(discount).collect();
    let values: Vec<Vec<f64>> = train
        .queries
        .iter()
        .map(|q| {
            let ideal = ideal_dcg(q, config.cutoff, config.gain);
            q.grades()
                .map(|g| if ideal > 0.0 { config.gain.apply(g) / ideal } else { 0.0 })
                .collect()
        })
        .collect();
    let score = |p: &PlackettLucePolicy, ds: &RankingDataset| -> Result<f64> {
        Ok(evaluate(
            p,
            ds,
            config.cutoff,
            &ExposureModel::default(),
            &RelevanceMapping::default(),
            EvalMode::MonteCarlo {
                samples: config.validation_samples,
                seed: stream_seed(config.seed, &[11]),
            },
            config.gain,
        )?
        .ndcg_at_k)
    };

    let mut policy = initial;
    let dim = policy.scorer.num_params();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, None, dim);
    let mut records = vec![SupervisedRecord {
        epoch: 0,
        validation_ndcg: validation.map(|v| score(&policy, v)).transpose()?,
    }];
    let mut best = (0usize, records[0].validation_ndcg.unwrap_or(f64::NEG_INFINITY), policy.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(config.seed, &[12, epoch as u64])));
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let parts = batch
                .par_iter()
                .map(|&qi| {
                    let q = &train.queries[qi];
                    let logits = policy.logits(q);
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                        config.seed,
                        &[13, epoch as u64, step as u64, q.id],
                    ));
                    let g = reinforce_logit_grad(
                        &logits,
                        policy.ranking_len(q.len()),
                        &positions,
                        &values[qi],
                        config.rankings_per_query_sample,
                        true,
                        &mut rng,
                    );
                    let inv_t = 1.0 / policy.temperature;
                    let gs: Vec<f64> = g.iter().map(|x| x * inv_t).collect();
                    let mut out = vec![0.0; dim];
                    policy.scorer.backprop(q, &gs, &mut out);
                    out
                })
                .collect::<Vec<_>>();
            let mut grad = vec![0.0; dim];
            for p in parts {
                for (t, v) in grad.iter_mut().zip(p) {
                    *t += v / batch.len() as f64;
                }
            }
            optimizer.step(policy.scorer.params_mut(), &mut grad);
        }
        if policy.scorer.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                message: "supervised parameters are not finite".into(),
            });
        }
        let validation_ndcg = validation.map(|v| score(&policy, v)).transpose()?;
        records.push(SupervisedRecord { epoch, validation_ndcg });
        match validation_ndcg {
            Some(v) if v > best.1 => best = (epoch, v, policy.clone()),
            Some(_) if epoch - best.0 >= config.patience => break,
            Some(_) => {}
            None => best = (epoch, f64::NEG_INFINITY, policy.clone()),
        }
    }
    Ok((best.2, records))
}
