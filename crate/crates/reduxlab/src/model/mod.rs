//! Deep-averaging classifier with fully analytic forward and backward passes.
//!
//! Token embeddings are averaged per segment (reducible and frozen), the two
//! segment vectors are concatenated, passed through tanh dense layers, and a
//! linear output layer produces class logits. An empty frozen segment
//! contributes a zero vector, so single-segment and paired inputs share one
//! code path. Removing a token means deleting it and re-averaging over the
//! shorter sequence.
//!
//! The backward pass returns gradients for every parameter tensor and for
//! each input position's embedding vector, for three objectives: the
//! cross-entropy training loss, the predicted probability of a chosen class
//! (the importance target), and the entropy of the output distribution (the
//! fine-tuning target). A logit objective is also available for comparing
//! gradient-importance variants.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub(crate) use train::batch_gradient as train_batch_gradient;
pub use train::{accuracy, train, Adam, EpochMetrics, TrainConfig};

use std::fmt;
use std::iter::Sum;

use ndarray::{Array1, Array2, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SegmentedExample;

/// Floating-point element type of the numeric core. Training runs in `f32`;
/// gradient checks and importance measurement can run the same code in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ndarray::LinalgScalar
    + ScalarOperand
    + std::ops::AddAssign
    + Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension `{0}` must be >= 1")]
    ZeroDimension(&'static str),
    #[error("reducible segment is empty; the model is never queried on empty input")]
    EmptyInput,
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("trace does not match these parameters")]
    MismatchedTrace,
    #[error("class {label} out of range for {classes} classes")]
    InvalidLabel { label: u32, classes: usize },
    #[error("probability entry {index} is negative")]
    NegativeProbability { index: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Shape of the network: vocabulary size, embedding width, hidden layer
/// widths (possibly none, giving a purely linear scorer over the averaged
/// embeddings), and class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size == 0 {
            return Err(ModelError::ZeroDimension("vocab_size"));
        }
        if self.embed_dim == 0 {
            return Err(ModelError::ZeroDimension("embed_dim"));
        }
        if self.num_classes == 0 {
            return Err(ModelError::ZeroDimension("num_classes"));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(ModelError::ZeroDimension("hidden_dims"));
        }
        Ok(())
    }

    /// Width of the concatenated segment averages fed to the dense stack.
    pub fn input_dim(&self) -> usize {
        2 * self.embed_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<F> {
    /// `out x in`, row-major.
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

/// Embedding matrix plus dense-layer weights of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub dims: ModelDims,
    /// `vocab_size x embed_dim`.
    pub embedding: Array2<F>,
    pub hidden: Vec<DenseLayer<F>>,
    pub output: DenseLayer<F>,
}

impl<F: Scalar> ModelParams<F> {
    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let conv2 = |a: &Array2<F>| a.mapv(|v| G::of_f64(v.as_f64()));
        let conv1 = |a: &Array1<F>| a.mapv(|v| G::of_f64(v.as_f64()));
        ModelParams {
            dims: self.dims.clone(),
            embedding: conv2(&self.embedding),
            hidden: self
                .hidden
                .iter()
                .map(|l| DenseLayer {
                    weight: conv2(&l.weight),
                    bias: conv1(&l.bias),
                })
                .collect(),
            output: DenseLayer {
                weight: conv2(&self.output.weight),
                bias: conv1(&self.output.bias),
            },
        }
    }

    /// Checks dimensional consistency and finiteness of every entry.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.dims.validate()?;
        let dims = &self.dims;
        if self.embedding.shape() != [dims.vocab_size, dims.embed_dim] {
            return Err(ModelError::BadConfig("embedding shape mismatch".into()));
        }
        let mut in_dim = dims.input_dim();
        if self.hidden.len() != dims.hidden_dims.len() {
            return Err(ModelError::BadConfig("hidden layer count mismatch".into()));
        }
        for (layer, &width) in self.hidden.iter().zip(&dims.hidden_dims) {
            if layer.weight.shape() != [width, in_dim] || layer.bias.len() != width {
                return Err(ModelError::BadConfig("hidden layer shape mismatch".into()));
            }
            in_dim = width;
        }
        if self.output.weight.shape() != [dims.num_classes, in_dim]
            || self.output.bias.len() != dims.num_classes
        {
            return Err(ModelError::BadConfig("output layer shape mismatch".into()));
        }
        let finite = self
            .tensors()
            .into_iter()
            .all(|t| t.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(ModelError::BadConfig("non-finite parameter entry".into()));
        }
        Ok(())
    }

    /// Flat view of every parameter tensor in checkpoint order:
    /// embedding, then each hidden layer's weight and bias, then the output
    /// layer's weight and bias.
    pub fn tensors(&self) -> Vec<&[F]> {
        let mut out = vec![self.embedding.as_slice().expect("standard layout")];
        for layer in &self.hidden {
            out.push(layer.weight.as_slice().expect("standard layout"));
            out.push(layer.bias.as_slice().expect("standard layout"));
        }
        out.push(self.output.weight.as_slice().expect("standard layout"));
        out.push(self.output.bias.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = vec![self.embedding.as_slice_mut().expect("standard layout")];
        for layer in &mut self.hidden {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.output.weight.as_slice_mut().expect("standard layout"));
        out.push(self.output.bias.as_slice_mut().expect("standard layout"));
        out
    }
}

/// Deterministic initialization: weights uniform in [-0.1, 0.1] drawn from a
/// seeded stream in checkpoint order, biases zero.
pub fn init_params(dims: ModelDims, seed: u64) -> Result<ModelParams<f32>, ModelError> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let range = Uniform::new_inclusive(-0.1f32, 0.1f32);
    let mut draw2 = |rows: usize, cols: usize| {
        Array2::from_shape_fn((rows, cols), |_| range.sample(&mut rng))
    };
    let embedding = draw2(dims.vocab_size, dims.embed_dim);
    let mut in_dim = dims.input_dim();
    let mut hidden = Vec::with_capacity(dims.hidden_dims.len());
    for &width in &dims.hidden_dims {
        hidden.push(DenseLayer {
            weight: draw2(width, in_dim),
            bias: Array1::zeros(width),
        });
        in_dim = width;
    }
    let output = DenseLayer {
        weight: draw2(dims.num_classes, in_dim),
        bias: Array1::zeros(dims.num_classes),
    };
    Ok(ModelParams {
        dims,
        embedding,
        hidden,
        output,
    })
}

/// Output distribution with a deterministic argmax (lowest class index wins
/// ties) and the probability assigned to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<F> {
    pub probs: Array1<F>,
    pub label: u32,
    pub confidence: F,
}

/// All intermediate values of one forward pass, sufficient to replay the
/// computation and to run the exact backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<F> {
    pub dims: ModelDims,
    pub reducible_ids: Vec<u32>,
    pub frozen_ids: Vec<u32>,
    pub reducible_avg: Array1<F>,
    pub frozen_avg: Array1<F>,
    pub input: Array1<F>,
    /// Post-tanh activation of each hidden layer.
    pub activations: Vec<Array1<F>>,
    pub logits: Array1<F>,
    pub probs: Array1<F>,
}

/// Scalar objective the backward pass differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSpec {
    /// `-log f(label | x)`, the training loss.
    CrossEntropy(u32),
    /// `f(class | x)` itself, the importance target.
    PredictedProbability(u32),
    /// The raw logit of a class, the alternative importance target.
    PredictedLogit(u32),
    /// `H(f(. | x))`, the fine-tuning target.
    OutputEntropy,
}

/// Gradients of one scalar objective with respect to every parameter tensor
/// and to each input position's embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<F> {
    pub embedding: Array2<F>,
    pub hidden: Vec<DenseLayer<F>>,
    pub output: DenseLayer<F>,
    /// One gradient per reducible position, in position order.
    pub reducible_embed: Vec<Array1<F>>,
    /// One gradient per frozen position, in position order.
    pub frozen_embed: Vec<Array1<F>>,
}

impl<F: Scalar> GradientSet<F> {
    pub fn tensors(&self) -> Vec<&[F]> {
        let mut out = vec![self.embedding.as_slice().expect("standard layout")];
        for layer in &self.hidden {
            out.push(layer.weight.as_slice().expect("standard layout"));
            out.push(layer.bias.as_slice().expect("standard layout"));
        }
        out.push(self.output.weight.as_slice().expect("standard layout"));
        out.push(self.output.bias.as_slice().expect("standard layout"));
        out
    }
}

/// Max-stabilized softmax; valid distribution for any finite logits.
pub fn softmax<F: Scalar>(logits: &Array1<F>) -> Array1<F> {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let exps = logits.mapv(|z| (z - max).exp());
    let sum: F = exps.iter().cloned().sum();
    exps.mapv(|e| e / sum)
}

pub(crate) fn argmax<F: Scalar>(values: &Array1<F>) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy in nats, with `0 * log 0 := 0`. Errors on negative entries.
pub fn entropy<F: Scalar>(probs: &[F]) -> Result<F, ModelError> {
    let mut h = F::zero();
    for (index, &p) in probs.iter().enumerate() {
        if p < F::zero() {
            return Err(ModelError::NegativeProbability { index });
        }
        if p > F::zero() {
            h = h - p * p.ln();
        }
    }
    Ok(h)
}

fn mean_embedding<F: Scalar>(
    params: &ModelParams<F>,
    ids: &[u32],
) -> Result<Array1<F>, ModelError> {
    let d = params.dims.embed_dim;
    let mut avg = Array1::zeros(d);
    if ids.is_empty() {
        return Ok(avg);
    }
    for &id in ids {
        if id as usize >= params.dims.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: params.dims.vocab_size,
            });
        }
        avg = avg + params.embedding.row(id as usize);
    }
    let n = F::from_usize(ids.len()).unwrap();
    Ok(avg.mapv(|v| v / n))
}

fn forward_core<F: Scalar>(
    params: &ModelParams<F>,
    input: &Array1<F>,
) -> (Vec<Array1<F>>, Array1<F>, Array1<F>) {
    let mut activations = Vec::with_capacity(params.hidden.len());
    let mut a = input.clone();
    for layer in &params.hidden {
        let z = layer.weight.dot(&a) + &layer.bias;
        a = z.mapv(|v| v.tanh());
        activations.push(a.clone());
    }
    let logits = params.output.weight.dot(&a) + &params.output.bias;
    let probs = softmax(&logits);
    (activations, logits, probs)
}

fn prediction_from_probs<F: Scalar>(probs: Array1<F>) -> Prediction<F> {
    let label = argmax(&probs) as u32;
    let confidence = probs[label as usize];
    Prediction {
        probs,
        label,
        confidence,
    }
}

/// Full forward pass over an example. Errors if the reducible segment is
/// empty.
pub fn forward<F: Scalar>(
    params: &ModelParams<F>,
    example: &SegmentedExample,
) -> Result<(Prediction<F>, ForwardTrace<F>), ModelError> {
    if example.reducible.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let reducible_avg = mean_embedding(params, &example.reducible)?;
    let frozen_avg = mean_embedding(params, &example.frozen)?;
    let mut input = Array1::zeros(params.dims.input_dim());
    let d = params.dims.embed_dim;
    for i in 0..d {
        input[i] = reducible_avg[i];
        input[d + i] = frozen_avg[i];
    }
    let (activations, logits, probs) = forward_core(params, &input);
    let trace = ForwardTrace {
        dims: params.dims.clone(),
        reducible_ids: example.reducible.clone(),
        frozen_ids: example.frozen.clone(),
        reducible_avg,
        frozen_avg,
        input,
        activations,
        logits: logits.clone(),
        probs: probs.clone(),
    };
    Ok((prediction_from_probs(probs), trace))
}

/// Forward pass from explicit per-position embedding vectors instead of
/// vocabulary lookups. This is the embedding-space probe used to verify the
/// per-position input gradients independently of the lookup table.
pub fn forward_from_embeddings<F: Scalar>(
    params: &ModelParams<F>,
    reducible: &[Array1<F>],
    frozen: &[Array1<F>],
) -> Result<(Prediction<F>, Array1<F>), ModelError> {
    if reducible.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let d = params.dims.embed_dim;
    let avg = |vecs: &[Array1<F>]| -> Array1<F> {
        let mut acc: Array1<F> = Array1::zeros(d);
        if vecs.is_empty() {
            return acc;
        }
        for v in vecs {
            acc = acc + v;
        }
        let n = F::from_usize(vecs.len()).unwrap();
        acc.mapv(|x| x / n)
    };
    let reducible_avg = avg(reducible);
    let frozen_avg = avg(frozen);
    let mut input = Array1::zeros(params.dims.input_dim());
    for i in 0..d {
        input[i] = reducible_avg[i];
        input[d + i] = frozen_avg[i];
    }
    let (_, logits, probs) = forward_core(params, &input);
    Ok((prediction_from_probs(probs), logits))
}

/// Value of the scalar objective a [`LossSpec`] names, given the outputs of
/// a forward pass.
pub fn loss_value<F: Scalar>(
    spec: LossSpec,
    logits: &Array1<F>,
    probs: &Array1<F>,
) -> Result<F, ModelError> {
    let classes = probs.len();
    let check = |c: u32| -> Result<usize, ModelError> {
        if (c as usize) < classes {
            Ok(c as usize)
        } else {
            Err(ModelError::InvalidLabel { label: c, classes })
        }
    };
    match spec {
        LossSpec::CrossEntropy(c) => Ok(-probs[check(c)?].ln()),
        LossSpec::PredictedProbability(c) => Ok(probs[check(c)?]),
        LossSpec::PredictedLogit(c) => Ok(logits[check(c)?]),
        LossSpec::OutputEntropy => entropy(probs.as_slice().expect("standard layout")),
    }
}

/// d(objective)/d(logits) for each supported objective.
fn logit_gradient<F: Scalar>(
    spec: LossSpec,
    probs: &Array1<F>,
) -> Result<Array1<F>, ModelError> {
    let classes = probs.len();
    let check = |c: u32| -> Result<usize, ModelError> {
        if (c as usize) < classes {
            Ok(c as usize)
        } else {
            Err(ModelError::InvalidLabel { label: c, classes })
        }
    };
    match spec {
        LossSpec::CrossEntropy(c) => {
            let c = check(c)?;
            let mut g = probs.clone();
            g[c] = g[c] - F::one();
            Ok(g)
        }
        LossSpec::PredictedProbability(c) => {
            let c = check(c)?;
            let pc = probs[c];
            let mut g = probs.mapv(|p| -pc * p);
            g[c] = g[c] + pc;
            Ok(g)
        }
        LossSpec::PredictedLogit(c) => {
            let c = check(c)?;
            let mut g = Array1::zeros(classes);
            g[c] = F::one();
            Ok(g)
        }
        LossSpec::OutputEntropy => {
            let h = entropy(probs.as_slice().expect("standard layout"))?;
            Ok(probs.mapv(|p| {
                if p > F::zero() {
                    -p * (p.ln() + h)
                } else {
                    F::zero()
                }
            }))
        }
    }
}

fn outer<F: Scalar>(col: &Array1<F>, row: &Array1<F>) -> Array2<F> {
    Array2::from_shape_fn((col.len(), row.len()), |(i, j)| col[i] * row[j])
}

/// Backpropagates `d(objective)/d(logits)` to the concatenated input vector,
/// optionally collecting per-layer parameter gradients along the way.
fn backprop_to_input<F: Scalar>(
    params: &ModelParams<F>,
    trace: &ForwardTrace<F>,
    d_logits: &Array1<F>,
    collect: bool,
) -> (Option<(Vec<DenseLayer<F>>, DenseLayer<F>)>, Array1<F>) {
    let last = trace.activations.last().unwrap_or(&trace.input);
    let output_grad = if collect {
        Some(DenseLayer {
            weight: outer(d_logits, last),
            bias: d_logits.clone(),
        })
    } else {
        None
    };
    let mut delta = params.output.weight.t().dot(d_logits);
    let mut hidden_grads: Vec<DenseLayer<F>> = Vec::with_capacity(params.hidden.len());
    for i in (0..params.hidden.len()).rev() {
        let a = &trace.activations[i];
        let dz = Array1::from_shape_fn(a.len(), |j| delta[j] * (F::one() - a[j] * a[j]));
        if collect {
            let prev = if i == 0 {
                &trace.input
            } else {
                &trace.activations[i - 1]
            };
            hidden_grads.push(DenseLayer {
                weight: outer(&dz, prev),
                bias: dz.clone(),
            });
        }
        delta = params.hidden[i].weight.t().dot(&dz);
    }
    hidden_grads.reverse();
    let param_grads = output_grad.map(|out| (hidden_grads, out));
    (param_grads, delta)
}

fn split_input_gradient<F: Scalar>(
    trace: &ForwardTrace<F>,
    d_input: &Array1<F>,
) -> (Vec<Array1<F>>, Vec<Array1<F>>) {
    let d = trace.dims.embed_dim;
    let n_r = trace.reducible_ids.len();
    let n_f = trace.frozen_ids.len();
    let scale_r = F::one() / F::from_usize(n_r).unwrap();
    let per_reducible: Array1<F> =
        Array1::from_shape_fn(d, |i| d_input[i] * scale_r);
    let reducible = vec![per_reducible; n_r];
    let frozen = if n_f == 0 {
        Vec::new()
    } else {
        let scale_f = F::one() / F::from_usize(n_f).unwrap();
        let per_frozen: Array1<F> =
            Array1::from_shape_fn(d, |i| d_input[d + i] * scale_f);
        vec![per_frozen; n_f]
    };
    (reducible, frozen)
}

/// Exact analytic gradients of the objective named by `spec`, with respect to
/// every parameter tensor and to each input position's embedding vector.
/// Gradients of positions holding the same token accumulate into that token's
/// embedding row.
pub fn backward<F: Scalar>(
    params: &ModelParams<F>,
    trace: &ForwardTrace<F>,
    spec: LossSpec,
) -> Result<GradientSet<F>, ModelError> {
    if trace.dims != params.dims {
        return Err(ModelError::MismatchedTrace);
    }
    let d_logits = logit_gradient(spec, &trace.probs)?;
    let (param_grads, d_input) = backprop_to_input(params, trace, &d_logits, true);
    let (hidden, output) = param_grads.expect("collect=true always yields parameter grads");
    let (reducible_embed, frozen_embed) = split_input_gradient(trace, &d_input);
    let mut embedding = Array2::zeros((params.dims.vocab_size, params.dims.embed_dim));
    for (pos, &id) in trace.reducible_ids.iter().enumerate() {
        let mut row = embedding.row_mut(id as usize);
        row += &reducible_embed[pos];
    }
    for (pos, &id) in trace.frozen_ids.iter().enumerate() {
        let mut row = embedding.row_mut(id as usize);
        row += &frozen_embed[pos];
    }
    Ok(GradientSet {
        embedding,
        hidden,
        output,
        reducible_embed,
        frozen_embed,
    })
}

/// Per-position input gradients only, skipping the parameter tensors. Same
/// chain rule as [`backward`], used on the importance path where parameter
/// gradients are not needed.
pub(crate) fn input_embedding_gradients<F: Scalar>(
    params: &ModelParams<F>,
    trace: &ForwardTrace<F>,
    spec: LossSpec,
) -> Result<(Vec<Array1<F>>, Vec<Array1<F>>), ModelError> {
    if trace.dims != params.dims {
        return Err(ModelError::MismatchedTrace);
    }
    let d_logits = logit_gradient(spec, &trace.probs)?;
    let (_, d_input) = backprop_to_input(params, trace, &d_logits, false);
    Ok(split_input_gradient(trace, &d_input))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn example(reducible: Vec<u32>, frozen: Vec<u32>) -> SegmentedExample {
        SegmentedExample {
            id: 0,
            reducible,
            frozen,
            label: 0,
        }
    }

    fn dims(v: usize, d: usize, hidden: Vec<usize>, c: usize) -> ModelDims {
        ModelDims {
            vocab_size: v,
            embed_dim: d,
            hidden_dims: hidden,
            num_classes: c,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_params(dims(6, 3, vec![4], 2), 11).unwrap();
        let b = init_params(dims(6, 3, vec![4], 2), 11).unwrap();
        let c = init_params(dims(6, 3, vec![4], 2), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_zero_dims() {
        assert!(matches!(
            init_params(dims(6, 0, vec![4], 2), 1),
            Err(ModelError::ZeroDimension("embed_dim"))
        ));
        assert!(matches!(
            init_params(dims(6, 3, vec![0], 2), 1),
            Err(ModelError::ZeroDimension("hidden_dims"))
        ));
    }

    #[test]
    fn init_biases_are_zero_and_weights_in_range() {
        let p = init_params(dims(5, 2, vec![3], 2), 3).unwrap();
        assert!(p.hidden[0].bias.iter().all(|&b| b == 0.0));
        assert!(p.output.bias.iter().all(|&b| b == 0.0));
        assert!(p
            .embedding
            .iter()
            .all(|&w| (-0.1..=0.1).contains(&w)));
    }

    #[test]
    fn zero_params_give_uniform_probs() {
        let mut p = init_params(dims(4, 2, vec![3], 4), 0).unwrap();
        for t in p.tensors_mut() {
            t.fill(0.0);
        }
        let (pred, _) = forward(&p, &example(vec![1, 2], vec![])).unwrap();
        for &prob in pred.probs.iter() {
            assert!((prob - 0.25).abs() < 1e-7);
        }
        assert_eq!(pred.label, 0); // lowest-index tie break
    }

    #[test]
    fn forward_rejects_empty_reducible() {
        let p = init_params(dims(4, 2, vec![3], 2), 0).unwrap();
        assert!(matches!(
            forward(&p, &example(vec![], vec![1])),
            Err(ModelError::EmptyInput)
        ));
    }

    #[test]
    fn forward_is_permutation_invariant_within_a_segment() {
        let p = init_params(dims(8, 3, vec![4], 3), 5).unwrap();
        let (a, _) = forward(&p, &example(vec![1, 3, 5], vec![2, 4])).unwrap();
        let (b, _) = forward(&p, &example(vec![5, 1, 3], vec![4, 2])).unwrap();
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn forward_is_pure_bitwise() {
        let p = init_params(dims(8, 3, vec![4, 4], 3), 5).unwrap();
        let e = example(vec![1, 3, 3, 7], vec![2]);
        let (pa, ta) = forward(&p, &e).unwrap();
        let (pb, tb) = forward(&p, &e).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(ta, tb);
    }

    /// Hand-evaluated straight-line computation of a one-token, V=2, d=2,
    /// C=2 network, written out independently of the forward implementation.
    #[test]
    fn forward_matches_hand_evaluation_on_tiny_network() {
        let dims = dims(2, 2, vec![2], 2);
        let embedding =
            Array2::from_shape_vec((2, 2), vec![0.3f64, -0.2, 0.05, 0.11]).unwrap();
        let w1 = Array2::from_shape_vec(
            (2, 4),
            vec![0.1, 0.2, -0.3, 0.4, -0.5, 0.6, 0.7, -0.8],
        )
        .unwrap();
        let b1 = Array1::from_vec(vec![0.01, -0.02]);
        let wo = Array2::from_shape_vec((2, 2), vec![0.9, -0.1, 0.2, 0.3]).unwrap();
        let bo = Array1::from_vec(vec![0.05, -0.05]);
        let params = ModelParams {
            dims,
            embedding,
            hidden: vec![DenseLayer {
                weight: w1,
                bias: b1,
            }],
            output: DenseLayer {
                weight: wo,
                bias: bo,
            },
        };
        let (pred, _) = forward(&params, &example(vec![1], vec![])).unwrap();

        // by hand: single token 1 -> avg = e1 = [0.05, 0.11], frozen = [0, 0]
        let x = [0.05f64, 0.11, 0.0, 0.0];
        let z1 = 0.1 * x[0] + 0.2 * x[1] + -0.3 * x[2] + 0.4 * x[3] + 0.01;
        let z2 = -0.5 * x[0] + 0.6 * x[1] + 0.7 * x[2] + -0.8 * x[3] - 0.02;
        let (a1, a2) = (z1.tanh(), z2.tanh());
        let l1 = 0.9 * a1 - 0.1 * a2 + 0.05;
        let l2 = 0.2 * a1 + 0.3 * a2 - 0.05;
        let m = l1.max(l2);
        let (e1, e2) = ((l1 - m).exp(), (l2 - m).exp());
        let p1 = e1 / (e1 + e2);
        assert!((pred.probs[0] - p1).abs() < 1e-15);
        assert!((pred.probs[1] - (1.0 - p1)).abs() < 1e-15);
    }

    #[test]
    fn entropy_known_values() {
        let ln4 = 4.0f64.ln();
        assert!((entropy(&[0.25, 0.25, 0.25, 0.25]).unwrap() - ln4).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        let ln2 = 2.0f64.ln();
        assert!((entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - ln2).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_negative_entries() {
        assert!(matches!(
            entropy(&[0.5, -0.1, 0.6]),
            Err(ModelError::NegativeProbability { index: 1 })
        ));
    }

    #[test]
    fn entropy_gradient_is_zero_at_uniform_output() {
        let mut p = init_params(dims(4, 2, vec![3], 4), 0).unwrap();
        for t in p.tensors_mut() {
            t.fill(0.0f32);
        }
        let p: ModelParams<f64> = p.cast();
        let (_, trace) = forward(&p, &example(vec![1, 2], vec![])).unwrap();
        let g = logit_gradient(LossSpec::OutputEntropy, &trace.probs).unwrap();
        for &v in g.iter() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_token_accumulates_both_positional_gradients() {
        let p: ModelParams<f64> = init_params(dims(6, 3, vec![4], 2), 9).unwrap().cast();
        let (_, trace) = forward(&p, &example(vec![2, 2, 5], vec![])).unwrap();
        let g = backward(&p, &trace, LossSpec::CrossEntropy(1)).unwrap();
        let expected = &g.reducible_embed[0] + &g.reducible_embed[1];
        for i in 0..3 {
            assert!((g.embedding[[2, i]] - expected[i]).abs() < 1e-15);
        }
        for i in 0..3 {
            assert!((g.embedding[[5, i]] - g.reducible_embed[2][i]).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_mismatched_trace() {
        let p1: ModelParams<f64> = init_params(dims(6, 3, vec![4], 2), 9).unwrap().cast();
        let p2: ModelParams<f64> = init_params(dims(6, 3, vec![5], 2), 9).unwrap().cast();
        let (_, trace) = forward(&p1, &example(vec![2, 3], vec![])).unwrap();
        assert!(matches!(
            backward(&p2, &trace, LossSpec::CrossEntropy(0)),
            Err(ModelError::MismatchedTrace)
        ));
    }

    /// Quick finite-difference spot check; the full sweep over random
    /// configurations and all three objectives lives in the acceptance suite.
    #[test]
    fn backward_matches_finite_differences_spot_check() {
        let p: ModelParams<f64> = init_params(dims(5, 2, vec![3], 3), 21).unwrap().cast();
        let e = example(vec![1, 4, 1], vec![2]);
        let (_, trace) = forward(&p, &e).unwrap();
        for spec in [
            LossSpec::CrossEntropy(2),
            LossSpec::PredictedProbability(0),
            LossSpec::OutputEntropy,
        ] {
            let grads = backward(&p, &trace, spec).unwrap();
            let h = 1e-5;
            // check a handful of coordinates in each tensor
            for (ti, _) in p.tensors().iter().enumerate() {
                let len = p.tensors()[ti].len();
                for k in [0, len / 2, len - 1] {
                    let mut plus = p.clone();
                    plus.tensors_mut()[ti][k] += h;
                    let mut minus = p.clone();
                    minus.tensors_mut()[ti][k] -= h;
                    let f = |m: &ModelParams<f64>| {
                        let (_, t) = forward(m, &e).unwrap();
                        loss_value(spec, &t.logits, &t.probs).unwrap()
                    };
                    let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
                    let analytic = grads.tensors()[ti][k];
                    // relative 1e-5 with an absolute floor: below ~1e-9 the
                    // central-difference oracle's own truncation error dominates
                    let tol = (1e-5 * numeric.abs().max(analytic.abs())).max(1e-9);
                    assert!(
                        (numeric - analytic).abs() < tol,
                        "{spec:?} tensor {ti} coord {k}: numeric {numeric} vs analytic {analytic}"
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_is_a_valid_distribution(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..6)
        ) {
            let probs = softmax(&Array1::from_vec(logits));
            let sum: f64 = probs.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            for &p in probs.iter() {
                prop_assert!(p.is_finite());
                prop_assert!((0.0..=1.0).contains(&p));
            }
        }
    }
}
