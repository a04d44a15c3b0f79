//! Iterative input reduction: delete the least important reducible tokens
//! one at a time while the model's argmax stays fixed.
//!
//! Four strategies share the per-step semantics (importance recomputed fresh
//! on the current input, ties to the lowest position):
//!
//! - [`reduce_greedy`]: delete the single least-important token until that
//!   deletion would change the prediction, or length 1 is reached.
//! - [`reduce_beam`]: per step and per candidate of length `L`, expand the
//!   `max(1, min(k, L - 3))` least-important deletions, keep the
//!   prediction-preserving ones, dedup by position set, rank the pool by
//!   confidence, and keep the top `k`. Returns every minimal-length terminal.
//! - [`oracle_min_length`]: exhaustive search over the deletion DAG for
//!   short inputs, the ground truth the beam is tested against.
//! - [`random_reduce`]: a uniformly random surviving position set with no
//!   preservation requirement, the baseline negative-set generator.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, SegmentedExample};
use crate::importance::{importance, ImportanceError, ImportanceMethod, ImportanceVector};
use crate::model::{forward, ModelError, ModelParams, Prediction, Scalar};

pub mod io;

#[derive(Debug, Error)]
pub enum ReduceError {
    #[error("beam size must be >= 1")]
    InvalidBeamSize,
    #[error("exhaustive oracle refuses inputs longer than 12 tokens, got {0}")]
    OracleTooLong(usize),
    #[error("target length {target} out of range 1..={len}")]
    BadTargetLength { target: usize, len: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Importance(#[from] ImportanceError),
}

/// Per-step beam width: `max(1, min(k, L - 3))` for current length `L`.
pub fn beam_width(k: usize, len: usize) -> usize {
    k.min(len.saturating_sub(3)).max(1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BeamConfig {
    /// Maximum beam size.
    pub k: usize,
    pub method: ImportanceMethod,
    /// Cap on deletion steps; `None` means up to the input length.
    pub max_steps: Option<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            k: 5,
            method: ImportanceMethod::InputGradient,
            max_steps: None,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), ReduceError> {
        if self.k == 0 {
            return Err(ReduceError::InvalidBeamSize);
        }
        Ok(())
    }

    /// Beam so large the pool is never truncated; the width schedule still
    /// applies.
    pub fn unbounded(method: ImportanceMethod) -> Self {
        BeamConfig {
            k: usize::MAX,
            method,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodTag {
    Greedy,
    Beam(usize),
    Random,
    Oracle,
}

impl std::fmt::Display for MethodTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MethodTag::Greedy => write!(f, "greedy"),
            MethodTag::Beam(k) => write!(f, "beam({k})"),
            MethodTag::Random => write!(f, "random"),
            MethodTag::Oracle => write!(f, "oracle"),
        }
    }
}

impl std::str::FromStr for MethodTag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(MethodTag::Greedy),
            "random" => Ok(MethodTag::Random),
            "oracle" => Ok(MethodTag::Oracle),
            other => {
                if let Some(k) = other
                    .strip_prefix("beam(")
                    .and_then(|r| r.strip_suffix(')'))
                {
                    k.parse::<usize>()
                        .map(MethodTag::Beam)
                        .map_err(|e| format!("bad beam size in `{other}`: {e}"))
                } else {
                    Err(format!("unknown method tag `{other}`"))
                }
            }
        }
    }
}

/// One deletion: the position removed (original coordinates), the positions
/// that survive it, the confidence after removal, and the importance vector
/// that chose it (absent when an outcome was reloaded from disk).
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionStep<F> {
    pub surviving: Vec<u32>,
    pub removed: u32,
    pub confidence: F,
    pub importance: Option<ImportanceVector<F>>,
}

/// One minimal-length prediction-preserving reduction and the full path that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MinimalReduction<F> {
    pub positions: Vec<u32>,
    pub confidence: F,
    pub path: Vec<ReductionStep<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionOutcome<F> {
    pub original: SegmentedExample,
    pub original_prediction: Prediction<F>,
    /// All minimal-length reductions, deduplicated as position sets, ranked
    /// by confidence (ties by position-set order). Never empty.
    pub minimal: Vec<MinimalReduction<F>>,
    pub method: MethodTag,
    pub importance_method: ImportanceMethod,
    /// Deterministic work counter: forward and backward passes spent by the
    /// search (recorded instead of wall-clock time so artifacts are
    /// byte-reproducible).
    pub model_calls: u64,
}

impl<F: Scalar> ReductionOutcome<F> {
    pub fn example_id(&self) -> u32 {
        self.original.id
    }

    pub fn reduced_length(&self) -> usize {
        self.minimal[0].positions.len()
    }

    /// Confidence at the representative (top-ranked) minimal reduction.
    pub fn reduced_confidence(&self) -> F {
        self.minimal[0].confidence
    }
}

/// Projects an example onto a set of surviving reducible positions. The
/// frozen segment is carried along untouched.
pub fn project(example: &SegmentedExample, positions: &[u32]) -> SegmentedExample {
    SegmentedExample {
        id: example.id,
        reducible: positions
            .iter()
            .map(|&p| example.reducible[p as usize])
            .collect(),
        frozen: example.frozen.clone(),
        label: example.label,
    }
}

fn importance_cost(method: ImportanceMethod, len: usize) -> u64 {
    match method {
        // one base forward plus one forward per deletion
        ImportanceMethod::LeaveOneOut => len as u64 + 1,
        // one forward plus one backward
        ImportanceMethod::InputGradient => 2,
    }
}

/// Greedy reduction: remove the least important token until that removal
/// would change the argmax, or the input is a single token. The returned
/// state is the last prediction-preserving one.
pub fn reduce_greedy<F: Scalar>(
    params: &ModelParams<F>,
    example: &SegmentedExample,
    method: ImportanceMethod,
) -> Result<ReductionOutcome<F>, ReduceError> {
    let (original_prediction, _) = forward(params, example)?;
    let mut model_calls = 1u64;
    let y = original_prediction.label;
    let mut positions: Vec<u32> = (0..example.reducible.len() as u32).collect();
    let mut confidence = original_prediction.confidence;
    let mut path: Vec<ReductionStep<F>> = Vec::new();
    while positions.len() > 1 {
        let current = project(example, &positions);
        let iv = importance(params, &current, method)?;
        model_calls += importance_cost(method, positions.len());
        let idx = crate::importance::least_important(&iv.scores);
        let mut child = positions.clone();
        let removed = child.remove(idx);
        let (pred, _) = forward(params, &project(example, &child))?;
        model_calls += 1;
        if pred.label != y {
            break;
        }
        confidence = pred.confidence;
        path.push(ReductionStep {
            surviving: child.clone(),
            removed,
            confidence: pred.confidence,
            importance: Some(iv),
        });
        positions = child;
    }
    Ok(ReductionOutcome {
        original: example.clone(),
        original_prediction,
        minimal: vec![MinimalReduction {
            positions,
            confidence,
            path,
        }],
        method: MethodTag::Greedy,
        importance_method: method,
        model_calls,
    })
}

#[derive(Clone)]
struct Candidate<F> {
    positions: Vec<u32>,
    confidence: F,
    path: Vec<ReductionStep<F>>,
}

/// Beam-search reduction with the shrinking width schedule. At every step
/// each candidate expands its `beam_width(k, L)` least-important deletions;
/// surviving (prediction-preserving) children are pooled across candidates,
/// deduplicated by position set, ranked by confidence descending, and
/// truncated to `k`. A candidate with no surviving child is terminal. All
/// minimal-length terminals are returned, each with its full path.
pub fn reduce_beam<F: Scalar>(
    params: &ModelParams<F>,
    example: &SegmentedExample,
    config: &BeamConfig,
) -> Result<ReductionOutcome<F>, ReduceError> {
    config.validate()?;
    let (original_prediction, _) = forward(params, example)?;
    let mut model_calls = 1u64;
    let y = original_prediction.label;
    let n = example.reducible.len();
    let max_steps = config.max_steps.unwrap_or(n);
    let mut beam = vec![Candidate {
        positions: (0..n as u32).collect(),
        confidence: original_prediction.confidence,
        path: Vec::new(),
    }];
    let mut terminals: Vec<Candidate<F>> = Vec::new();
    while !beam.is_empty() {
        let mut pool: Vec<Candidate<F>> = Vec::new();
        let mut seen: HashSet<Vec<u32>> = HashSet::new();
        for cand in std::mem::take(&mut beam) {
            let len = cand.positions.len();
            if len == 1 || cand.path.len() >= max_steps {
                terminals.push(cand);
                continue;
            }
            let current = project(example, &cand.positions);
            let iv = importance(params, &current, config.method)?;
            model_calls += importance_cost(config.method, len);
            let mut order: Vec<usize> = (0..len).collect();
            order.sort_by(|&a, &b| {
                iv.scores[a]
                    .partial_cmp(&iv.scores[b])
                    .expect("finite importance scores")
                    .then(a.cmp(&b))
            });
            let width = beam_width(config.k, len);
            let mut any_survivor = false;
            for &idx in order.iter().take(width) {
                let mut child = cand.positions.clone();
                let removed = child.remove(idx);
                let (pred, _) = forward(params, &project(example, &child))?;
                model_calls += 1;
                if pred.label != y {
                    continue;
                }
                any_survivor = true;
                if seen.insert(child.clone()) {
                    let mut path = cand.path.clone();
                    path.push(ReductionStep {
                        surviving: child.clone(),
                        removed,
                        confidence: pred.confidence,
                        importance: Some(iv.clone()),
                    });
                    pool.push(Candidate {
                        positions: child,
                        confidence: pred.confidence,
                        path,
                    });
                }
            }
            if !any_survivor {
                terminals.push(cand);
            }
        }
        pool.sort_by(|a, b| {
            b.confidence
                .partial_cmp(&a.confidence)
                .expect("finite confidence")
                .then_with(|| a.positions.cmp(&b.positions))
        });
        pool.truncate(config.k);
        beam = pool;
    }
    let min_len = terminals
        .iter()
        .map(|c| c.positions.len())
        .min()
        .expect("at least the initial candidate terminates");
    let mut minimal: Vec<MinimalReduction<F>> = terminals
        .into_iter()
        .filter(|c| c.positions.len() == min_len)
        .map(|c| MinimalReduction {
            positions: c.positions,
            confidence: c.confidence,
            path: c.path,
        })
        .collect();
    minimal.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .expect("finite confidence")
            .then_with(|| a.positions.cmp(&b.positions))
    });
    Ok(ReductionOutcome {
        original: example.clone(),
        original_prediction,
        minimal,
        method: MethodTag::Beam(config.k),
        importance_method: config.method,
        model_calls,
    })
}

/// Result of the exhaustive deletion-DAG search.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleResult {
    pub min_length: usize,
    /// Lexicographically smallest minimal position set.
    pub witness: Vec<u32>,
    /// Every reachable prediction-preserving position set of minimal length.
    pub minimal_sets: Vec<Vec<u32>>,
}

/// Exhaustive search over all deletion orders where every intermediate state
/// preserves the argmax. Refuses inputs longer than 12 tokens.
pub fn oracle_min_length<F: Scalar>(
    params: &ModelParams<F>,
    example: &SegmentedExample,
) -> Result<OracleResult, ReduceError> {
    let n = example.reducible.len();
    if n > 12 {
        return Err(ReduceError::OracleTooLong(n));
    }
    let (original, _) = forward(params, example)?;
    let y = original.label;
    let full: u32 = if n == 32 { u32::MAX } else { (1u32 << n) - 1 };
    let mut visited = vec![false; 1usize << n];
    visited[full as usize] = true;
    let mut frontier = vec![full];
    loop {
        let mut next = Vec::new();
        for &mask in &frontier {
            for bit in 0..n {
                if mask & (1 << bit) == 0 {
                    continue;
                }
                let child = mask & !(1 << bit);
                if child == 0 || visited[child as usize] {
                    continue;
                }
                let positions = mask_to_positions(child, n);
                let (pred, _) = forward(params, &project(example, &positions))?;
                if pred.label == y {
                    visited[child as usize] = true;
                    next.push(child);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    let mut minimal_sets: Vec<Vec<u32>> = frontier
        .iter()
        .map(|&mask| mask_to_positions(mask, n))
        .collect();
    minimal_sets.sort();
    Ok(OracleResult {
        min_length: minimal_sets[0].len(),
        witness: minimal_sets[0].clone(),
        minimal_sets,
    })
}

fn mask_to_positions(mask: u32, n: usize) -> Vec<u32> {
    (0..n as u32).filter(|&p| mask & (1 << p) != 0).collect()
}

/// Uniformly random surviving position set of the target size, deterministic
/// given the seed. No prediction-preservation requirement.
pub fn random_reduce(
    example: &SegmentedExample,
    target_length: usize,
    seed: u64,
) -> Result<Vec<u32>, ReduceError> {
    let n = example.reducible.len();
    if target_length < 1 || target_length > n {
        return Err(ReduceError::BadTargetLength {
            target: target_length,
            len: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<u32> = rand::seq::index::sample(&mut rng, n, target_length)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    positions.sort_unstable();
    Ok(positions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Search {
    Greedy,
    Beam { k: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReduceOptions {
    pub search: Search,
    pub method: ImportanceMethod,
    pub max_steps: Option<usize>,
    /// `Some(1)` forces the sequential reference path; `None` uses all
    /// available parallelism. Results are identical either way.
    pub workers: Option<usize>,
}

impl Default for ReduceOptions {
    fn default() -> Self {
        ReduceOptions {
            search: Search::Beam { k: 5 },
            method: ImportanceMethod::InputGradient,
            max_steps: None,
            workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReduceSummary {
    pub count: usize,
    pub error_count: usize,
    pub mean_original_length: f64,
    pub mean_reduced_length: f64,
    pub median_reduced_length: f64,
    pub mean_original_confidence: f64,
    pub mean_reduced_confidence: f64,
    pub accuracy_original: f64,
    pub accuracy_reduced: f64,
    pub total_model_calls: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetReduction<F> {
    /// Outcomes in input order, regardless of execution order.
    pub outcomes: Vec<ReductionOutcome<F>>,
    pub errors: Vec<(u32, String)>,
    pub summary: ReduceSummary,
}

/// Reduces every example of a dataset. Per-example failures are recorded,
/// not fatal. The reduced-accuracy column is recomputed from scratch on the
/// reduced inputs against gold labels.
pub fn reduce_dataset<F: Scalar>(
    params: &ModelParams<F>,
    dataset: &Dataset,
    options: &ReduceOptions,
) -> Result<DatasetReduction<F>, ReduceError> {
    let run_one = |example: &SegmentedExample| -> Result<ReductionOutcome<F>, ReduceError> {
        match options.search {
            Search::Greedy => reduce_greedy(params, example, options.method),
            Search::Beam { k } => reduce_beam(
                params,
                example,
                &BeamConfig {
                    k,
                    method: options.method,
                    max_steps: options.max_steps,
                },
            ),
        }
    };
    let results: Vec<Result<ReductionOutcome<F>, ReduceError>> = match options.workers {
        Some(1) => dataset.examples.iter().map(run_one).collect(),
        workers => {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers.unwrap_or(0))
                .build()
                .expect("thread pool");
            pool.install(|| dataset.examples.par_iter().map(run_one).collect())
        }
    };
    let mut outcomes = Vec::with_capacity(dataset.len());
    let mut errors = Vec::new();
    for (example, result) in dataset.examples.iter().zip(results) {
        match result {
            Ok(outcome) => outcomes.push(outcome),
            Err(e) => errors.push((example.id, e.to_string())),
        }
    }
    let summary = summarize(params, &outcomes, errors.len())?;
    Ok(DatasetReduction {
        outcomes,
        errors,
        summary,
    })
}

fn summarize<F: Scalar>(
    params: &ModelParams<F>,
    outcomes: &[ReductionOutcome<F>],
    error_count: usize,
) -> Result<ReduceSummary, ReduceError> {
    let count = outcomes.len();
    if count == 0 {
        return Ok(ReduceSummary {
            count,
            error_count,
            mean_original_length: 0.0,
            mean_reduced_length: 0.0,
            median_reduced_length: 0.0,
            mean_original_confidence: 0.0,
            mean_reduced_confidence: 0.0,
            accuracy_original: 0.0,
            accuracy_reduced: 0.0,
            total_model_calls: 0,
        });
    }
    let mut correct_original = 0usize;
    let mut correct_reduced = 0usize;
    let mut reduced_lengths = Vec::with_capacity(count);
    let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut total_model_calls = 0u64;
    for outcome in outcomes {
        if outcome.original_prediction.label == outcome.original.label {
            correct_original += 1;
        }
        let reduced = project(&outcome.original, &outcome.minimal[0].positions);
        let (pred, _) = forward(params, &reduced)?;
        if pred.label == outcome.original.label {
            correct_reduced += 1;
        }
        sums.0 += outcome.original.reducible.len() as f64;
        sums.1 += outcome.reduced_length() as f64;
        sums.2 += outcome.original_prediction.confidence.as_f64();
        sums.3 += outcome.reduced_confidence().as_f64();
        reduced_lengths.push(outcome.reduced_length() as f64);
        total_model_calls += outcome.model_calls;
    }
    Ok(ReduceSummary {
        count,
        error_count,
        mean_original_length: sums.0 / count as f64,
        mean_reduced_length: sums.1 / count as f64,
        median_reduced_length: crate::stats::median(&reduced_lengths).unwrap(),
        mean_original_confidence: sums.2 / count as f64,
        mean_reduced_confidence: sums.3 / count as f64,
        accuracy_original: correct_original as f64 / count as f64,
        accuracy_reduced: correct_reduced as f64 / count as f64,
        total_model_calls,
    })
}

/// Independent replay of an outcome's invariants: every stored path step and
/// every minimal reduction must preserve the original argmax, lengths must
/// shrink by exactly one per step, and minimal position sets must be unique
/// and share one length.
pub fn verify_outcome<F: Scalar>(
    params: &ModelParams<F>,
    outcome: &ReductionOutcome<F>,
) -> Result<(), String> {
    if outcome.minimal.is_empty() {
        return Err("no minimal reductions".into());
    }
    let y = outcome.original_prediction.label;
    let min_len = outcome.minimal[0].positions.len();
    if min_len == 0 {
        return Err("empty minimal reduction".into());
    }
    let mut seen: HashSet<&[u32]> = HashSet::new();
    for m in &outcome.minimal {
        if m.positions.len() != min_len {
            return Err(format!(
                "minimal lengths disagree: {} vs {min_len}",
                m.positions.len()
            ));
        }
        if !seen.insert(&m.positions) {
            return Err(format!("duplicate minimal position set {:?}", m.positions));
        }
        let mut expected_len = outcome.original.reducible.len();
        for step in &m.path {
            expected_len -= 1;
            if step.surviving.len() != expected_len {
                return Err(format!(
                    "step skipped lengths: {} vs {expected_len}",
                    step.surviving.len()
                ));
            }
            let (pred, _) = forward(params, &project(&outcome.original, &step.surviving))
                .map_err(|e| e.to_string())?;
            if pred.label != y {
                return Err(format!(
                    "intermediate state {:?} changed the prediction",
                    step.surviving
                ));
            }
        }
        match m.path.last() {
            Some(last) if last.surviving != m.positions => {
                return Err("path does not end at the minimal reduction".into())
            }
            None if m.positions.len() != outcome.original.reducible.len() => {
                return Err("empty path but reduced output".into())
            }
            _ => {}
        }
    }
    Ok(())
}
