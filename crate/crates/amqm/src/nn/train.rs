//! Mini-batch SGD training loop with per-epoch trace records.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

use super::model::{
    argmax, init_weights, model_backward, model_forward, sgd_step, values_finite, ModelConfig,
    Parameters,
};
use super::ops::Mode;
use super::tensor::{stack_batch, Tensor};
use super::{DOMAIN_DROPOUT, DOMAIN_SHUFFLE};

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            epochs: 10,
            learning_rate: 0.01,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl Hyperparams {
    /// Learning rate 0 is admitted deliberately: it pins the network at
    /// its initialization, which the sweep harness uses as a baseline.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::config(format!(
                "learning rate {} must be finite and nonnegative",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One labeled input.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Tensor,
    pub label: usize,
}

/// Train and test splits plus the class count they are labeled against.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub n_classes: usize,
}

impl SplitData {
    pub fn new(train: Vec<Sample>, test: Vec<Sample>, n_classes: usize) -> Result<SplitData> {
        if n_classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if train.is_empty() || test.is_empty() {
            return Err(Error::config(
                "both train and test splits must be nonempty",
            ));
        }
        let shape = train[0].input.shape().to_vec();
        for s in train.iter().chain(&test) {
            if s.label >= n_classes {
                return Err(Error::domain(format!(
                    "label {} out of range for {n_classes} classes",
                    s.label
                )));
            }
            if s.input.shape() != shape {
                return Err(Error::shape(format!(
                    "sample shape {:?} differs from {:?}",
                    s.input.shape(),
                    shape
                )));
            }
        }
        Ok(SplitData {
            train,
            test,
            n_classes,
        })
    }
}

/// One completed epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

/// Per-epoch history of a training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingTrace {
    pub records: Vec<EpochRecord>,
    /// Set when a batch produced a non-finite loss; the offending epoch
    /// was abandoned before applying its update and training stopped.
    pub diverged: bool,
}

pub const TRACE_HEADER: &str = "epoch,train_acc,test_acc,mean_loss,wall_seconds";

impl TrainingTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.3}\n",
                r.epoch, r.train_acc, r.test_acc, r.mean_loss, r.wall_seconds
            ));
        }
        out
    }

    pub fn final_test_acc(&self) -> Option<f64> {
        self.records.last().map(|r| r.test_acc)
    }
}

/// Fraction of samples whose eval-mode argmax matches the label.
pub fn evaluate_accuracy(
    config: &ModelConfig,
    params: &Parameters,
    samples: &[Sample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::config("cannot evaluate an empty sample list"));
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(64) {
        let inputs: Vec<Tensor> = chunk.iter().map(|s| s.input.clone()).collect();
        let batch = stack_batch(&inputs)?;
        let (probs, _) = model_forward(config, params, &batch, Mode::Eval, None)?;
        for (p, s) in probs.iter().zip(chunk) {
            if argmax(p) == s.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Trains from a fresh He initialization. Per epoch: seeded shuffle,
/// batches of `batch_size` (the last may be short), forward/backward/step
/// per batch, then eval-mode accuracy on both splits. Deterministic given
/// the seed.
pub fn train(
    config: &ModelConfig,
    data: &SplitData,
    hp: &Hyperparams,
) -> Result<(Parameters, TrainingTrace)> {
    config.validate()?;
    hp.validate()?;
    if config.n_classes != data.n_classes {
        return Err(Error::config(format!(
            "model has {} classes but data is labeled over {}",
            config.n_classes, data.n_classes
        )));
    }

    let mut params = init_weights(config, hp.seed)?;
    let mut shuffle_rng = SplitMix64::from_tags(hp.seed, &[DOMAIN_SHUFFLE]);
    let mut dropout_rng = SplitMix64::from_tags(hp.seed, &[DOMAIN_DROPOUT]);
    let mut trace = TrainingTrace::default();

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    'epochs: for epoch in 1..=hp.epochs {
        let started = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut loss_items = 0usize;
        for batch_indices in order.chunks(hp.batch_size) {
            let inputs: Vec<Tensor> = batch_indices
                .iter()
                .map(|&i| data.train[i].input.clone())
                .collect();
            let labels: Vec<usize> = batch_indices.iter().map(|&i| data.train[i].label).collect();
            let batch = stack_batch(&inputs)?;
            let (probs, cache) =
                model_forward(config, &params, &batch, Mode::Train, Some(&mut dropout_rng))?;
            // Divergence guard: the cross-entropy floor would hide a
            // non-finite distribution, so inspect the raw values.
            if !probs.iter().flatten().all(|v| v.is_finite()) {
                trace.diverged = true;
                break 'epochs;
            }
            let batch_loss = super::model::mean_batch_loss(&probs, &labels)?;
            if !batch_loss.is_finite() {
                trace.diverged = true;
                break 'epochs;
            }
            loss_sum += batch_loss * labels.len() as f64;
            loss_items += labels.len();
            let grads = model_backward(config, &params, &cache, &labels)?;
            if !values_finite(&grads.layers) {
                trace.diverged = true;
                break 'epochs;
            }
            sgd_step(&mut params, &grads, hp.learning_rate)?;
            if !values_finite(&params.layers) {
                trace.diverged = true;
                break 'epochs;
            }
        }
        let mean_loss = loss_sum / loss_items as f64;
        let train_acc = evaluate_accuracy(config, &params, &data.train)?;
        let test_acc = evaluate_accuracy(config, &params, &data.test)?;
        trace.records.push(EpochRecord {
            epoch,
            train_acc,
            test_acc,
            mean_loss,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((params, trace))
}
