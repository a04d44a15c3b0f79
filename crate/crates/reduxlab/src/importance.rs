//! Token importance scoring over the reducible segment.
//!
//! Two methods: exact leave-one-out (the confidence drop when one token is
//! deleted and the rest re-averaged) and the input-gradient approximation
//! (dot product of a token's embedding with the gradient of the predicted
//! class probability with respect to that embedding). Signs agree: positive
//! means the token supports the current prediction, negative means removing
//! it would raise confidence. Frozen tokens are never scored.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SegmentedExample;
use crate::model::{
    forward, input_embedding_gradients, LossSpec, ModelError, ModelParams, Prediction, Scalar,
};

#[derive(Debug, Error)]
pub enum ImportanceError {
    #[error("leave-one-out needs at least 2 reducible tokens, got {0}")]
    TooShort(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportanceMethod {
    #[serde(rename = "loo")]
    LeaveOneOut,
    #[serde(rename = "grad")]
    InputGradient,
}

impl std::fmt::Display for ImportanceMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ImportanceMethod::LeaveOneOut => write!(f, "loo"),
            ImportanceMethod::InputGradient => write!(f, "grad"),
        }
    }
}

impl std::str::FromStr for ImportanceMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "loo" => Ok(ImportanceMethod::LeaveOneOut),
            "grad" => Ok(ImportanceMethod::InputGradient),
            other => Err(format!("unknown importance method `{other}` (expected loo|grad)")),
        }
    }
}

/// Differentiation target for the gradient method: the predicted class
/// probability (default) or the raw logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientTarget {
    Probability,
    Logit,
}

/// Per-token scores over the reducible segment, tagged with the method that
/// produced them and the prediction they are measured against.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector<F> {
    pub scores: Vec<F>,
    pub method: ImportanceMethod,
    pub base: Prediction<F>,
}

/// Exact leave-one-out importance: `score_i = f(y|x) - f(y|x_-i)` where `y`
/// is the argmax on the current input. Costs exactly `n` extra forward
/// passes. Requires length >= 2 so every deletion leaves a non-empty input.
pub fn loo_importance<F: Scalar>(
    params: &ModelParams<F>,
    example: &SegmentedExample,
) -> Result<ImportanceVector<F>, ImportanceError> {
    let n = example.reducible.len();
    if n < 2 {
        return Err(ImportanceError::TooShort(n));
    }
    let (base, _) = forward(params, example)?;
    let y = base.label as usize;
    let mut scores = Vec::with_capacity(n);
    let mut shorter = example.clone();
    for i in 0..n {
        shorter.reducible.clear();
        shorter
            .reducible
            .extend(example.reducible.iter().enumerate().filter_map(|(j, &t)| {
                if j == i {
                    None
                } else {
                    Some(t)
                }
            }));
        let (without, _) = forward(params, &shorter)?;
        scores.push(base.confidence - without.probs[y]);
    }
    Ok(ImportanceVector {
        scores,
        method: ImportanceMethod::LeaveOneOut,
        base,
    })
}

/// Gradient approximation of leave-one-out from a single forward-backward
/// pass: each token's embedding dotted with the gradient of the predicted
/// class probability with respect to that position's embedding.
pub fn gradient_importance<F: Scalar>(
    params: &ModelParams<F>,
    example: &SegmentedExample,
) -> Result<ImportanceVector<F>, ImportanceError> {
    gradient_importance_with(params, example, GradientTarget::Probability)
}

pub fn gradient_importance_with<F: Scalar>(
    params: &ModelParams<F>,
    example: &SegmentedExample,
    target: GradientTarget,
) -> Result<ImportanceVector<F>, ImportanceError> {
    let (base, trace) = forward(params, example)?;
    let spec = match target {
        GradientTarget::Probability => LossSpec::PredictedProbability(base.label),
        GradientTarget::Logit => LossSpec::PredictedLogit(base.label),
    };
    let (reducible_grads, _) = input_embedding_gradients(params, &trace, spec)?;
    let scores = example
        .reducible
        .iter()
        .zip(&reducible_grads)
        .map(|(&id, grad)| {
            let row = params.embedding.row(id as usize);
            row.iter().zip(grad.iter()).map(|(&e, &g)| e * g).sum()
        })
        .collect();
    Ok(ImportanceVector {
        scores,
        method: ImportanceMethod::InputGradient,
        base,
    })
}

/// Dispatches on the method tag.
pub fn importance<F: Scalar>(
    params: &ModelParams<F>,
    example: &SegmentedExample,
    method: ImportanceMethod,
) -> Result<ImportanceVector<F>, ImportanceError> {
    match method {
        ImportanceMethod::LeaveOneOut => loo_importance(params, example),
        ImportanceMethod::InputGradient => gradient_importance(params, example),
    }
}

/// Index of the least important token; ties go to the lowest position.
pub fn least_important<F: Scalar>(scores: &[F]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = i;
        }
    }
    best
}

/// Affine rescaling of scores to [0, 1]; a constant vector maps to all 0.5.
pub fn heatmap<F: Scalar>(importance: &ImportanceVector<F>) -> Vec<F> {
    let scores = &importance.scores;
    if scores.is_empty() {
        return Vec::new();
    }
    let min = scores.iter().cloned().fold(F::infinity(), F::min);
    let max = scores.iter().cloned().fold(F::neg_infinity(), F::max);
    let span = max - min;
    if span == F::zero() {
        return vec![F::of_f64(0.5); scores.len()];
    }
    scores.iter().map(|&s| (s - min) / span).collect()
}

/// JSON export of one heatmap, as consumed by the report emitters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapExport {
    pub tokens: Vec<String>,
    pub weights: Vec<f64>,
    pub method: ImportanceMethod,
    pub confidence: f64,
}

impl HeatmapExport {
    pub fn new<F: Scalar>(tokens: Vec<String>, importance: &ImportanceVector<F>) -> Self {
        HeatmapExport {
            tokens,
            weights: heatmap(importance).iter().map(|w| w.as_f64()).collect(),
            method: importance.method,
            confidence: importance.base.confidence.as_f64(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, DenseLayer, ModelDims, ModelParams};
    use ndarray::{Array1, Array2};

    fn example(reducible: Vec<u32>) -> SegmentedExample {
        SegmentedExample {
            id: 0,
            reducible,
            frozen: vec![],
            label: 0,
        }
    }

    fn random_params(seed: u64) -> ModelParams<f64> {
        init_params(
            ModelDims {
                vocab_size: 6,
                embed_dim: 3,
                hidden_dims: vec![4],
                num_classes: 3,
            },
            seed,
        )
        .unwrap()
        .cast()
    }

    fn zero_embedding_params() -> ModelParams<f64> {
        let mut p = random_params(8);
        p.embedding.fill(0.0);
        p
    }

    /// Linear scorer over 1-d embeddings: logit of class 1 is `w * avg`,
    /// class 0 logit stays 0. Token values are handed in directly.
    fn linear_keyword_params(values: &[f64], w: f64) -> ModelParams<f64> {
        let v = values.len();
        let dims = ModelDims {
            vocab_size: v,
            embed_dim: 1,
            hidden_dims: vec![],
            num_classes: 2,
        };
        ModelParams {
            dims,
            embedding: Array2::from_shape_vec((v, 1), values.to_vec()).unwrap(),
            hidden: vec![],
            output: DenseLayer {
                weight: Array2::from_shape_vec((2, 2), vec![0.0, 0.0, w, 0.0]).unwrap(),
                bias: Array1::from_vec(vec![0.0, 0.0]),
            },
        }
    }

    #[test]
    fn constant_model_scores_are_exactly_zero() {
        let p = zero_embedding_params();
        let e = example(vec![1, 2, 3]);
        let loo = loo_importance(&p, &e).unwrap();
        assert!(loo.scores.iter().all(|&s| s == 0.0));
        let grad = gradient_importance(&p, &e).unwrap();
        assert!(grad.scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn loo_matches_explicit_forward_differences() {
        let p = random_params(17);
        let e = example(vec![1, 4, 2]);
        let iv = loo_importance(&p, &e).unwrap();
        let (base, _) = forward(&p, &e).unwrap();
        let y = base.label as usize;
        for i in 0..3 {
            let mut reduced = e.clone();
            reduced.reducible.remove(i);
            let (pred, _) = forward(&p, &reduced).unwrap();
            assert_eq!(iv.scores[i], base.confidence - pred.probs[y]);
        }
    }

    #[test]
    fn loo_rejects_single_token_input() {
        let p = random_params(1);
        assert!(matches!(
            loo_importance(&p, &example(vec![2])),
            Err(ImportanceError::TooShort(1))
        ));
    }

    /// A token that pulls against the predicted class: deleting it raises
    /// confidence, so its importance is negative.
    #[test]
    fn distractor_token_gets_negative_score() {
        // token 0: strong class-1 keyword (+5), token 1: distractor (-1),
        // token 2: neutral filler (0)
        let p = linear_keyword_params(&[5.0, -1.0, 0.0], 2.0);
        let e = example(vec![0, 1, 2]);
        let (base, _) = forward(&p, &e).unwrap();
        assert_eq!(base.label, 1);
        let iv = loo_importance(&p, &e).unwrap();
        assert!(iv.scores[1] < 0.0, "distractor score {}", iv.scores[1]);
        assert!(iv.scores[0] > 0.0);
    }

    #[test]
    fn duplicated_token_scores_each_position() {
        let p = random_params(23);
        let e = example(vec![2, 2, 5]);
        let iv = gradient_importance(&p, &e).unwrap();
        assert_eq!(iv.scores.len(), 3);
        // identical token in identical context: positions score equally,
        // but both entries exist independently
        assert_eq!(iv.scores[0], iv.scores[1]);
    }

    #[test]
    fn gradient_importance_is_deterministic_bitwise() {
        let p = random_params(29);
        let e = example(vec![1, 3, 5, 2]);
        let a = gradient_importance(&p, &e).unwrap();
        let b = gradient_importance(&p, &e).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn logit_target_runs_and_differs_in_general() {
        let p = random_params(31);
        let e = example(vec![1, 3, 5]);
        let prob = gradient_importance_with(&p, &e, GradientTarget::Probability).unwrap();
        let logit = gradient_importance_with(&p, &e, GradientTarget::Logit).unwrap();
        assert_eq!(prob.scores.len(), logit.scores.len());
    }

    #[test]
    fn heatmap_rescales_and_handles_constants() {
        let base = loo_importance(&random_params(2), &example(vec![1, 2])).unwrap().base;
        let iv = |scores: Vec<f64>| ImportanceVector {
            scores,
            method: ImportanceMethod::LeaveOneOut,
            base: base.clone(),
        };
        assert_eq!(heatmap(&iv(vec![1.0, 3.0])), vec![0.0, 1.0]);
        assert_eq!(heatmap(&iv(vec![2.0, 2.0, 2.0])), vec![0.5, 0.5, 0.5]);
        assert_eq!(heatmap(&iv(vec![-1.0, 0.0, 1.0])), vec![0.0, 0.5, 1.0]);
    }

    /// Independent naive recomputation of leave-one-out, compared bitwise.
    #[test]
    fn loo_equals_naive_recomputation_bitwise() {
        for seed in 0..20u64 {
            let p = random_params(seed);
            let e = example(vec![
                (seed % 6) as u32,
                ((seed + 2) % 6) as u32,
                ((seed + 4) % 6) as u32,
                1,
            ]);
            let iv = loo_importance(&p, &e).unwrap();
            let (base, _) = forward(&p, &e).unwrap();
            for i in 0..e.reducible.len() {
                let kept: Vec<u32> = e
                    .reducible
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, &t)| t)
                    .collect();
                let (pred, _) = forward(&p, &example(kept)).unwrap();
                let naive = base.probs[base.label as usize] - pred.probs[base.label as usize];
                assert_eq!(iv.scores[i], naive, "position {i} seed {seed}");
            }
        }
    }
}
