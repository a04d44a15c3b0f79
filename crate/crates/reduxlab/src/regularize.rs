//! Entropy-regularized fine-tuning on reduced examples.
//!
//! The objective combines the log-likelihood on regular training examples
//! with a weighted entropy bonus on the negative set of reduced inputs:
//! updates alternate between batches of regular examples (maximizing
//! `sum log f(y|x)`) and batches sampled with replacement from the reduced
//! set (maximizing `lambda * sum H(f(.|x))`), with a separate Adam optimizer
//! carrying moment state for each term. A random-reduction baseline builds
//! its negative set by randomly deleting tokens down to the same lengths.

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, SegmentedExample, Split};
use crate::model::{
    accuracy, entropy, forward, Adam, LossSpec, ModelError, ModelParams, Scalar,
};
use crate::reduction::{
    random_reduce, reduce_dataset, ReduceError, ReduceOptions, ReductionOutcome, Search,
};

#[derive(Debug, Error)]
pub enum RegularizeError {
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("the {0} set is empty")]
    EmptySet(&'static str),
    #[error("non-finite loss in {phase} batch {batch} of epoch {epoch}")]
    NonFiniteLoss {
        phase: &'static str,
        epoch: usize,
        batch: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reduce(#[from] ReduceError),
}

/// How a negative set was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    InputReduction,
    Random,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::InputReduction => write!(f, "input-reduction"),
            Provenance::Random => write!(f, "random"),
        }
    }
}

/// One reduced input, linked to the training example it came from. The
/// frozen segment is carried along so the model sees the same pairing it
/// will see at reduction time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReducedEntry {
    pub source_id: u32,
    pub reducible: Vec<u32>,
    pub frozen: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReducedSet {
    pub entries: Vec<ReducedEntry>,
    pub provenance: Provenance,
}

impl ReducedSet {
    /// Union over outcomes of all minimal-length reductions: an example with
    /// two minimal reductions contributes two entries.
    pub fn from_outcomes<F: Scalar>(outcomes: &[ReductionOutcome<F>]) -> Self {
        let mut entries = Vec::new();
        for outcome in outcomes {
            for minimal in &outcome.minimal {
                entries.push(ReducedEntry {
                    source_id: outcome.original.id,
                    reducible: minimal
                        .positions
                        .iter()
                        .map(|&p| outcome.original.reducible[p as usize])
                        .collect(),
                    frozen: outcome.original.frozen.clone(),
                });
            }
        }
        ReducedSet {
            entries,
            provenance: Provenance::InputReduction,
        }
    }

    /// Counts of entry lengths, for the baseline's length-matching check.
    pub fn length_histogram(&self) -> Vec<(usize, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.reducible.len()).or_insert(0usize) += 1;
        }
        counts.into_iter().collect()
    }
}

/// Runs beam reduction over every training example and collects all minimal
/// reductions into the negative set.
pub fn build_reduced_training_set<F: Scalar>(
    params: &ModelParams<F>,
    train: &Dataset,
    beam_k: usize,
    method: crate::importance::ImportanceMethod,
    workers: Option<usize>,
) -> Result<(ReducedSet, Vec<ReductionOutcome<F>>), RegularizeError> {
    let result = reduce_dataset(
        params,
        train,
        &ReduceOptions {
            search: Search::Beam { k: beam_k },
            method,
            max_steps: None,
            workers,
        },
    )?;
    if !result.errors.is_empty() {
        return Err(RegularizeError::BadConfig(format!(
            "{} training examples failed to reduce",
            result.errors.len()
        )));
    }
    Ok((ReducedSet::from_outcomes(&result.outcomes), result.outcomes))
}

/// For each entry of the reference set, a random reduction of the same
/// source example to the same length, so the two negative sets match
/// length-for-length. Deterministic given the seed.
pub fn build_random_reduced_set(
    train: &Dataset,
    reference: &ReducedSet,
    seed: u64,
) -> Result<ReducedSet, RegularizeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(reference.entries.len());
    for entry in &reference.entries {
        let source = train
            .examples
            .iter()
            .find(|e| e.id == entry.source_id)
            .ok_or_else(|| {
                RegularizeError::BadConfig(format!(
                    "reference entry points at unknown example {}",
                    entry.source_id
                ))
            })?;
        let positions = random_reduce(source, entry.reducible.len(), rng.gen())?;
        entries.push(ReducedEntry {
            source_id: source.id,
            reducible: positions
                .iter()
                .map(|&p| source.reducible[p as usize])
                .collect(),
            frozen: source.frozen.clone(),
        });
    }
    Ok(ReducedSet {
        entries,
        provenance: Provenance::Random,
    })
}

/// Fine-tuning hyperparameters. Defaults: entropy weight 1e-3, learning rate
/// 2e-4, two regular batches alternating with two reduced batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub regular_batches: usize,
    pub reduced_batches: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            lambda: 1e-3,
            learning_rate: 2e-4,
            regular_batches: 2,
            reduced_batches: 2,
            epochs: 10,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<(), RegularizeError> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(RegularizeError::BadConfig(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(RegularizeError::BadConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.regular_batches == 0 || self.reduced_batches == 0 {
            return Err(RegularizeError::BadConfig(
                "alternation counts must be >= 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(RegularizeError::BadConfig("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Objective bookkeeping for one alternation cycle: the log-likelihood summed
/// over the cycle's regular batches, the weighted entropy summed over its
/// reduced batches, and their sum (the combined objective restricted to the
/// examples the cycle saw).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleMetrics {
    pub cycle: usize,
    pub epoch: usize,
    pub loglik_term: f64,
    pub entropy_term: f64,
    pub objective: f64,
}

/// Alternating fine-tuning: `regular_batches` maximum-likelihood updates on
/// regular examples, then `reduced_batches` entropy-ascent updates on reduced
/// examples sampled with replacement, repeated over shuffled epochs. One
/// epoch is one pass over the regular training data. Separate Adam state per
/// term; the reduced-batch sampler draws from its own seeded stream, so with
/// `lambda = 0` the parameter trajectory is bit-identical to plain
/// maximum-likelihood fine-tuning on the same schedule.
pub fn finetune(
    params: ModelParams<f32>,
    train: &Dataset,
    reduced: &ReducedSet,
    config: &FineTuneConfig,
) -> Result<(ModelParams<f32>, Vec<CycleMetrics>), RegularizeError> {
    config.validate()?;
    if train.is_empty() {
        return Err(RegularizeError::EmptySet("regular"));
    }
    if reduced.entries.is_empty() {
        return Err(RegularizeError::EmptySet("reduced"));
    }
    if train.split != Split::Train {
        return Err(RegularizeError::BadConfig(
            "fine-tuning requires the train split".into(),
        ));
    }
    let mut params = params;
    let mut regular_opt = Adam::for_params(config.learning_rate, &params);
    let mut reduced_opt = Adam::for_params(config.learning_rate, &params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    // distinct stream so reduced sampling never perturbs the shuffle order
    let mut reduced_rng =
        ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let entry_dist = Uniform::new(0, reduced.entries.len());
    let reduced_examples: Vec<SegmentedExample> = reduced
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| SegmentedExample {
            id: i as u32,
            reducible: e.reducible.clone(),
            frozen: e.frozen.clone(),
            label: 0, // unused by the entropy objective
        })
        .collect();
    let mut metrics = Vec::new();
    let mut indices: Vec<usize> = (0..train.len()).collect();
    let mut cycle = 0usize;
    for epoch in 0..config.epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut chunks = indices.chunks(config.batch_size).enumerate().peekable();
        while chunks.peek().is_some() {
            let mut loglik_term = 0.0f64;
            for _ in 0..config.regular_batches {
                let Some((batch_no, chunk)) = chunks.next() else {
                    break;
                };
                let batch: Vec<&SegmentedExample> =
                    chunk.iter().map(|&i| &train.examples[i]).collect();
                let (grads, mean_ce) = crate::model::train_batch_gradient(
                    &params,
                    &batch,
                    |e| LossSpec::CrossEntropy(e.label),
                    1.0,
                )?;
                if !mean_ce.is_finite() {
                    return Err(RegularizeError::NonFiniteLoss {
                        phase: "regular",
                        epoch,
                        batch: batch_no,
                    });
                }
                regular_opt.step(&mut params, &grads);
                loglik_term += -mean_ce * batch.len() as f64;
            }
            let mut entropy_term = 0.0f64;
            for reduced_batch in 0..config.reduced_batches {
                let batch: Vec<&SegmentedExample> = (0..config.batch_size)
                    .map(|_| &reduced_examples[entry_dist.sample(&mut reduced_rng)])
                    .collect();
                // ascend lambda * H by descending its negation
                let (grads, mean_h) = crate::model::train_batch_gradient(
                    &params,
                    &batch,
                    |_| LossSpec::OutputEntropy,
                    -config.lambda,
                )?;
                if !mean_h.is_finite() {
                    return Err(RegularizeError::NonFiniteLoss {
                        phase: "reduced",
                        epoch,
                        batch: reduced_batch,
                    });
                }
                reduced_opt.step(&mut params, &grads);
                entropy_term += config.lambda * mean_h * batch.len() as f64;
            }
            metrics.push(CycleMetrics {
                cycle,
                epoch,
                loglik_term,
                entropy_term,
                objective: loglik_term + entropy_term,
            });
            cycle += 1;
        }
    }
    Ok((params, metrics))
}

/// Identical protocol with a random negative set, length-matched to the
/// reference set entry-for-entry. `reduction_seed` drives the random
/// deletions; `config.seed` drives the schedule as in [`finetune`].
pub fn finetune_random_baseline(
    params: ModelParams<f32>,
    train: &Dataset,
    reference: &ReducedSet,
    config: &FineTuneConfig,
    reduction_seed: u64,
) -> Result<(ModelParams<f32>, Vec<CycleMetrics>, ReducedSet), RegularizeError> {
    let random_set = build_random_reduced_set(train, reference, reduction_seed)?;
    let (tuned, metrics) = finetune(params, train, &random_set, config)?;
    Ok((tuned, metrics, random_set))
}

/// Mean output entropy over a set of reduced inputs.
pub fn mean_entropy<F: Scalar>(
    params: &ModelParams<F>,
    reduced: &ReducedSet,
) -> Result<f64, RegularizeError> {
    if reduced.entries.is_empty() {
        return Err(RegularizeError::EmptySet("reduced"));
    }
    let mut total = 0.0f64;
    for (i, entry) in reduced.entries.iter().enumerate() {
        let example = SegmentedExample {
            id: i as u32,
            reducible: entry.reducible.clone(),
            frozen: entry.frozen.clone(),
            label: 0,
        };
        let (pred, _) = forward(params, &example)?;
        total += entropy(pred.probs.as_slice().expect("standard layout"))?.as_f64();
    }
    Ok(total / reduced.entries.len() as f64)
}

/// Validation accuracy helper re-exported for before/after comparisons.
pub fn validation_accuracy(
    params: &ModelParams<f32>,
    validation: &Dataset,
) -> Result<f64, RegularizeError> {
    Ok(accuracy(params, validation)?)
}
