//! Maximum-likelihood training loop with Adam and a seeded per-epoch shuffle.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{backward, forward, loss_value, LossSpec, ModelError, ModelParams, Scalar};
use crate::corpus::{Dataset, Split};

/// Training hyperparameters. The optimizer is Adam with the standard moment
/// parameters (0.9, 0.999, 1e-8).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(ModelError::BadConfig(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(ModelError::BadConfig("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

/// Adam over the flattened parameter tensors, in checkpoint order. Each
/// instance carries its own moment state, so callers that alternate between
/// objectives keep one optimizer per objective.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(learning_rate: f64, shapes: &[usize]) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    pub fn for_params(learning_rate: f64, params: &ModelParams<F>) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self::new(learning_rate, &shapes)
    }

    /// One update step. `grads` must be flattened in the same tensor order
    /// as `params.tensors_mut()`.
    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &[Vec<F>]) {
        self.step += 1;
        let t = self.step;
        let b1 = F::of_f64(self.beta1);
        let b2 = F::of_f64(self.beta2);
        let one = F::one();
        let bias1 = F::of_f64(1.0 - self.beta1.powi(t as i32));
        let bias2 = F::of_f64(1.0 - self.beta2.powi(t as i32));
        let lr = F::of_f64(self.learning_rate);
        let eps = F::of_f64(self.epsilon);
        for (ti, tensor) in params.tensors_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.m[ti], &mut self.v[ti]);
            let g = &grads[ti];
            for k in 0..tensor.len() {
                m[k] = b1 * m[k] + (one - b1) * g[k];
                v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                tensor[k] = tensor[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Accumulates the mean gradient of a scalar objective over a batch and
/// reports the mean objective value. `scale` multiplies the gradient (use
/// -lambda to ascend a weighted objective with a minimizing optimizer).
pub(crate) fn batch_gradient<F: Scalar>(
    params: &ModelParams<F>,
    batch: &[&crate::corpus::SegmentedExample],
    spec_of: impl Fn(&crate::corpus::SegmentedExample) -> LossSpec,
    scale: f64,
) -> Result<(Vec<Vec<F>>, f64), ModelError> {
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut acc: Vec<Vec<F>> = shapes.iter().map(|&n| vec![F::zero(); n]).collect();
    let mut total = 0.0f64;
    let weight = F::of_f64(scale / batch.len() as f64);
    for example in batch {
        let (_, trace) = forward(params, example)?;
        let spec = spec_of(example);
        total += loss_value(spec, &trace.logits, &trace.probs)?.as_f64();
        let grads = backward(params, &trace, spec)?;
        for (ti, tensor) in grads.tensors().into_iter().enumerate() {
            let dst = &mut acc[ti];
            for (k, &g) in tensor.iter().enumerate() {
                dst[k] = dst[k] + g * weight;
            }
        }
    }
    Ok((acc, total / batch.len() as f64))
}

/// Trains with maximum likelihood. Deterministic given the seed: the only
/// randomness is the per-epoch index shuffle. Reports the mean cross-entropy
/// per epoch and, when a validation set is supplied, its accuracy.
pub fn train(
    params: ModelParams<f32>,
    dataset: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(ModelParams<f32>, Vec<EpochMetrics>), ModelError> {
    config.validate()?;
    if dataset.split != Split::Train {
        return Err(ModelError::BadConfig(
            "training requires a dataset with the train split tag".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(ModelError::BadConfig("training dataset is empty".into()));
    }
    let mut params = params;
    let mut optimizer = Adam::for_params(config.learning_rate, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        indices.shuffle(&mut rng);
        let mut losses = Vec::new();
        for (batch_no, chunk) in indices.chunks(config.batch_size).enumerate() {
            let batch: Vec<&crate::corpus::SegmentedExample> =
                chunk.iter().map(|&i| &dataset.examples[i]).collect();
            let (grads, loss) =
                batch_gradient(&params, &batch, |e| LossSpec::CrossEntropy(e.label), 1.0)?;
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            optimizer.step(&mut params, &grads);
            losses.push(loss);
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let val_accuracy = match validation {
            Some(val) => Some(accuracy(&params, val)?),
            None => None,
        };
        metrics.push(EpochMetrics {
            epoch,
            train_loss,
            val_accuracy,
        });
        log::info!(
            "epoch {epoch}: loss {train_loss:.5}{}",
            val_accuracy
                .map(|a| format!(", val acc {a:.4}"))
                .unwrap_or_default()
        );
    }
    Ok((params, metrics))
}

/// Fraction of examples whose argmax matches the gold label.
pub fn accuracy<F: Scalar>(
    params: &ModelParams<F>,
    dataset: &Dataset,
) -> Result<f64, ModelError> {
    let mut correct = 0usize;
    for example in &dataset.examples {
        let (pred, _) = forward(params, example)?;
        if pred.label == example.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}
